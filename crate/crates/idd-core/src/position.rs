//! Coordinate-mask targets, position heads, and the position loss.
//!
//! A position head is a small two-layer conv regressor that predicts a
//! horizontal and a vertical absolute-coordinate mask from a feature map.
//! The teacher's head is pretrained against analytic coordinate ramps on
//! frozen teacher features; during distillation the student head trains
//! jointly and its input gradient flows into the student backbone.
//!
//! The loss compares like with like: rows of the horizontal masks against
//! rows, columns of the vertical masks against columns, each L2-normalized
//! so only the coordinate *pattern* is transferred, not its scale.

use ndarray::{Array1, Array2, ArrayView1};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::models::{image_to_map, SegNet};
use crate::nn::{relu, relu_backward, Conv2d, ConvCache, FeatureMap};
use crate::rng::{stream_rng, tags};

/// Epsilon added to L2 norms before dividing; keeps near-zero predicted
/// rows finite early in training.
pub const NORM_EPS: f64 = 1e-12;

/// Paired horizontal/vertical coordinate masks.
///
/// Analytic targets have constant columns in `p_hor` (column `j` carries
/// `j`, 1-indexed) and constant rows in `p_ver`; predicted masks are free
/// regression outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionMasks {
    pub p_hor: Array2<f64>,
    pub p_ver: Array2<f64>,
}

impl PositionMasks {
    pub fn spatial(&self) -> (usize, usize) {
        self.p_hor.dim()
    }
}

/// Analytic targets: `p_hor[i][j] = j`, `p_ver[i][j] = i`, 1-indexed.
pub fn make_coordinate_targets(h: usize, w: usize) -> Result<PositionMasks> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidSpec(format!(
            "coordinate targets need positive dims, got {h}x{w}"
        )));
    }
    Ok(PositionMasks {
        p_hor: Array2::from_shape_fn((h, w), |(_, j)| (j + 1) as f64),
        p_ver: Array2::from_shape_fn((h, w), |(i, _)| (i + 1) as f64),
    })
}

/// Targets rescaled to (0, 1] for regression conditioning.
pub fn make_scaled_targets(h: usize, w: usize) -> Result<PositionMasks> {
    let t = make_coordinate_targets(h, w)?;
    Ok(PositionMasks {
        p_hor: t.p_hor / w as f64,
        p_ver: t.p_ver / h as f64,
    })
}

/// Two 3x3 conv layers regressing a feature map to two coordinate masks.
#[derive(Debug)]
pub struct PositionHead {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub frozen: bool,
    pub in_channels: usize,
    pub hidden: usize,
    pub init_seed: u64,
}

pub struct PositionHeadCache {
    c1: ConvCache,
    act1: FeatureMap,
    c2: ConvCache,
    h: usize,
    w: usize,
}

impl PositionHead {
    pub fn new(in_channels: usize, hidden: usize, init_seed: u64) -> Self {
        let mut rng = stream_rng(init_seed, tags::HEAD_INIT);
        PositionHead {
            conv1: Conv2d::new(in_channels, hidden, 3, 1, 1, &mut rng),
            conv2: Conv2d::new(hidden, 2, 3, 1, 1, &mut rng),
            frozen: false,
            in_channels,
            hidden,
            init_seed,
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_len() + self.conv2.param_len()
    }

    /// Parameters in checkpoint order: conv1 weight, conv1 bias, conv2
    /// weight, conv2 bias.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.conv1.write_params(&mut out);
        self.conv2.write_params(&mut out);
        out
    }

    pub fn load_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                context: "position head flat parameters",
                left: vec![flat.len()],
                right: vec![self.param_count()],
            });
        }
        let used = self.conv1.read_params(flat);
        self.conv2.read_params(&flat[used..]);
        Ok(())
    }

    pub fn for_each_param_slice_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        f(self.conv1.weight.as_slice_mut().expect("contiguous"));
        f(self.conv1.bias.as_slice_mut().expect("contiguous"));
        f(self.conv2.weight.as_slice_mut().expect("contiguous"));
        f(self.conv2.bias.as_slice_mut().expect("contiguous"));
    }

    fn check_channels(&self, features: &FeatureMap) -> Result<()> {
        if features.channels() != self.in_channels {
            return Err(Error::ShapeMismatch {
                context: "position head input channels",
                left: vec![features.channels()],
                right: vec![self.in_channels],
            });
        }
        Ok(())
    }

    fn split_masks(out: &FeatureMap) -> PositionMasks {
        let (h, w) = out.spatial();
        PositionMasks {
            p_hor: Array2::from_shape_fn((h, w), |(y, x)| out.data[[y * w + x, 0]]),
            p_ver: Array2::from_shape_fn((h, w), |(y, x)| out.data[[y * w + x, 1]]),
        }
    }

    pub fn forward(&self, features: &FeatureMap) -> Result<PositionMasks> {
        self.check_channels(features)?;
        let out = self.conv2.forward(&relu(&self.conv1.forward(features)?))?;
        Ok(Self::split_masks(&out))
    }

    pub fn forward_cached(&self, features: &FeatureMap) -> Result<(PositionMasks, PositionHeadCache)> {
        self.check_channels(features)?;
        let (y1, c1) = self.conv1.forward_cached(features)?;
        let act1 = relu(&y1);
        let (out, c2) = self.conv2.forward_cached(&act1)?;
        Ok((
            Self::split_masks(&out),
            PositionHeadCache {
                c1,
                act1,
                c2,
                h: features.h,
                w: features.w,
            },
        ))
    }

    /// Backward pass from mask gradients; accumulates parameter gradients
    /// into `grads` (flat layout of [`PositionHead::flatten_params`]) and
    /// returns the gradient on the input features.
    pub fn backward(
        &self,
        cache: &PositionHeadCache,
        dmasks: &PositionMasks,
        grads: &mut [f64],
    ) -> FeatureMap {
        let (h, w) = (cache.h, cache.w);
        let mut dout = Array2::<f64>::zeros((h * w, 2));
        for y in 0..h {
            for x in 0..w {
                dout[[y * w + x, 0]] = dmasks.p_hor[[y, x]];
                dout[[y * w + x, 1]] = dmasks.p_ver[[y, x]];
            }
        }
        let (g1, g2) = grads.split_at_mut(self.conv1.param_len());
        let dact1 = self.conv2.backward(&cache.c2, &dout, g2);
        let drelu = relu_backward(&dact1.data, &cache.act1);
        self.conv1.backward(&cache.c1, &drelu, g1)
    }
}

/// Predicted masks for a feature map; errors on channel mismatch.
pub fn position_head_forward(head: &PositionHead, features: &FeatureMap) -> Result<PositionMasks> {
    head.forward(features)
}

/// Loss value plus the number of exactly-zero vectors met while
/// normalizing (logged by the trainer, never an error).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiLoss {
    pub value: f64,
    pub zero_vectors: usize,
}

fn unit(v: ArrayView1<f64>, zero_count: &mut usize) -> Array1<f64> {
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 {
        *zero_count += 1;
    }
    v.mapv(|x| x / (norm + NORM_EPS))
}

/// `1/2 * sum over p_hor rows of ||unit(t) - unit(s)||  +
///  1/2 * sum over p_ver columns of ||unit(t) - unit(s)||`.
pub fn position_info_loss(teacher: &PositionMasks, student: &PositionMasks) -> Result<PiLoss> {
    let (loss, _) = pi_loss_impl(teacher, student, false)?;
    Ok(loss)
}

/// Loss and its gradient with respect to the student masks; the teacher
/// side is treated as a constant.
pub fn position_info_loss_with_grad(
    teacher: &PositionMasks,
    student: &PositionMasks,
) -> Result<(PiLoss, PositionMasks)> {
    let (loss, grad) = pi_loss_impl(teacher, student, true)?;
    Ok((loss, grad.expect("grad requested")))
}

fn pi_loss_impl(
    teacher: &PositionMasks,
    student: &PositionMasks,
    want_grad: bool,
) -> Result<(PiLoss, Option<PositionMasks>)> {
    let (h, w) = teacher.spatial();
    if student.spatial() != (h, w)
        || teacher.p_ver.dim() != (h, w)
        || student.p_ver.dim() != (h, w)
    {
        return Err(Error::ShapeMismatch {
            context: "position masks",
            left: vec![h, w],
            right: vec![student.spatial().0, student.spatial().1],
        });
    }
    let mut zero_vectors = 0usize;
    let mut value = 0.0;
    let mut grad = want_grad.then(|| PositionMasks {
        p_hor: Array2::zeros((h, w)),
        p_ver: Array2::zeros((h, w)),
    });

    // One normalized-distance term; returns the term value and writes the
    // student-side gradient scaled by `weight`.
    let term = |t: ArrayView1<f64>,
                    s: ArrayView1<f64>,
                    weight: f64,
                    zero_vectors: &mut usize,
                    mut gout: Option<ndarray::ArrayViewMut1<f64>>| {
        let t_hat = unit(t, zero_vectors);
        let s_norm = s.dot(&s).sqrt();
        if s_norm == 0.0 {
            *zero_vectors += 1;
        }
        let denom = s_norm + NORM_EPS;
        let s_hat = s.mapv(|x| x / denom);
        let diff = &t_hat - &s_hat;
        let dist = diff.dot(&diff).sqrt();
        if let Some(g) = gout.as_mut() {
            if dist > 0.0 {
                // d dist/d s_hat = (s_hat - t_hat)/dist, then through the
                // normalization Jacobian: v/denom - s * (s . v)/(s_norm*denom^2)
                let v = (&s_hat - &t_hat) / dist;
                let sv = s.dot(&v);
                for i in 0..s.len() {
                    let mut gi = v[i] / denom;
                    if s_norm > 0.0 {
                        gi -= s[i] * sv / (s_norm * denom * denom);
                    }
                    g[i] += weight * gi;
                }
            }
        }
        dist
    };

    // rows of the horizontal masks
    for i in 0..h {
        let g = grad.as_mut().map(|g| g.p_hor.row_mut(i));
        value += 0.5
            * term(
                teacher.p_hor.row(i),
                student.p_hor.row(i),
                0.5,
                &mut zero_vectors,
                g,
            );
    }
    // columns of the vertical masks
    for j in 0..w {
        let g = grad.as_mut().map(|g| g.p_ver.column_mut(j));
        value += 0.5
            * term(
                teacher.p_ver.column(j),
                student.p_ver.column(j),
                0.5,
                &mut zero_vectors,
                g,
            );
    }

    Ok((
        PiLoss {
            value,
            zero_vectors,
        },
        grad,
    ))
}

/// Configuration for position-head pretraining.
#[derive(Debug, Clone)]
pub struct PosPretrainConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for PosPretrainConfig {
    fn default() -> Self {
        PosPretrainConfig {
            iters: 1500,
            batch_size: 8,
            lr: 0.2,
            momentum: 0.9,
            hidden: 4,
            seed: 1,
        }
    }
}

/// Measurements taken during pretraining.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PretrainStats {
    pub initial_val_mse: f64,
    pub final_val_mse: f64,
    /// Mean Pearson correlation between predicted and target masks on the
    /// held-out set (averaged over both mask kinds and all samples).
    pub mean_corr: f64,
}

fn pearson(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let n = a.len() as f64;
    let ma = a.sum() / n;
    let mb = b.sum() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

fn head_mse(pred: &PositionMasks, target: &PositionMasks) -> f64 {
    let n = (pred.p_hor.len() + pred.p_ver.len()) as f64;
    let dh = (&pred.p_hor - &target.p_hor).mapv(|v| v * v).sum();
    let dv = (&pred.p_ver - &target.p_ver).mapv(|v| v * v).sum();
    (dh + dv) / n
}

fn val_stats(
    head: &PositionHead,
    features: &[FeatureMap],
    target: &PositionMasks,
) -> Result<(f64, f64)> {
    let mut mse = 0.0;
    let mut corr = 0.0;
    for f in features {
        let pred = head.forward(f)?;
        mse += head_mse(&pred, target);
        corr += 0.5 * (pearson(&pred.p_hor, &target.p_hor) + pearson(&pred.p_ver, &target.p_ver));
    }
    let n = features.len().max(1) as f64;
    Ok((mse / n, corr / n))
}

/// Trains a head by MSE against `[0,1]`-scaled coordinate targets on the
/// features of a frozen model. SGD with momentum at a constant rate;
/// deterministic given the config seed.
pub fn pretrain_position_head(
    source: &SegNet,
    train: &[Sample],
    val: &[Sample],
    cfg: &PosPretrainConfig,
) -> Result<(PositionHead, PretrainStats)> {
    if !source.frozen {
        return Err(Error::Config(
            "position head pretraining requires a frozen feature source".into(),
        ));
    }
    if train.is_empty() {
        return Err(Error::Config("position head pretraining needs samples".into()));
    }
    let (h, w) = {
        let (_, ih, iw) = train[0].image.dim();
        (ih, iw)
    };
    let target = make_scaled_targets(h, w)?;
    let mut head = PositionHead::new(source.spec.feature_dim, cfg.hidden, cfg.seed);

    // Frozen source: cache the low-res backbone output per sample, finalize
    // per use. Identical numerics to a plain forward (same finalize path).
    let mut low_cache: Vec<Option<FeatureMap>> = vec![None; train.len()];
    let features_of = |model: &SegNet,
                           cache: &mut Vec<Option<FeatureMap>>,
                           idx: usize|
     -> Result<FeatureMap> {
        if cache[idx].is_none() {
            let x = image_to_map(&train[idx].image);
            cache[idx] = Some(model.forward_backbone(&x)?);
        }
        Ok(model
            .finalize(cache[idx].as_ref().expect("just filled"), h, w)?
            .features)
    };

    let val_features: Vec<FeatureMap> = val
        .iter()
        .map(|s| Ok(source.forward(&image_to_map(&s.image))?.features))
        .collect::<Result<_>>()?;
    let (initial_val_mse, _) = val_stats(&head, &val_features, &target)?;

    let mut momentum = vec![0.0f64; head.param_count()];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = stream_rng(cfg.seed, tags::BATCH_ORDER);
    let mut cursor = order.len(); // forces an initial shuffle
    let scale = 1.0 / (2.0 * (h * w) as f64);

    for iter in 0..cfg.iters {
        let mut grads = vec![0.0f64; head.param_count()];
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            if cursor >= order.len() {
                use rand::seq::SliceRandom;
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;

            let feats = features_of(source, &mut low_cache, idx)?;
            let (pred, cache) = head.forward_cached(&feats)?;
            batch_loss += head_mse(&pred, &target);
            let inv_b = 1.0 / cfg.batch_size as f64;
            let dmasks = PositionMasks {
                p_hor: (&pred.p_hor - &target.p_hor).mapv(|d| 2.0 * d * scale * inv_b),
                p_ver: (&pred.p_ver - &target.p_ver).mapv(|d| 2.0 * d * scale * inv_b),
            };
            head.backward(&cache, &dmasks, &mut grads);
        }
        if !batch_loss.is_finite() {
            return Err(Error::TrainAborted {
                iteration: iter,
                reason: "non-finite position pretraining loss".into(),
            });
        }
        let mut at = 0;
        head.for_each_param_slice_mut(|slice| {
            for v in slice.iter_mut() {
                let g = grads[at];
                momentum[at] = cfg.momentum * momentum[at] + g;
                *v -= cfg.lr * momentum[at];
                at += 1;
            }
        });
    }

    let (final_val_mse, mean_corr) = val_stats(&head, &val_features, &target)?;
    head.frozen = true;
    Ok((
        head,
        PretrainStats {
            initial_val_mse,
            final_val_mse,
            mean_corr,
        },
    ))
}
