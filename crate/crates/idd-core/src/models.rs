//! Teacher and student segmentation networks.
//!
//! Both are stacks of 3x3 conv+ReLU blocks (the first two strided) followed
//! by bilinear upsampling back to input resolution and a 1x1 classifier.
//! The teacher additionally runs a small pyramid-pooling context block over
//! its last backbone stage. The pre-logit feature map is exposed at label
//! resolution so every distillation loss can consume it directly.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    adaptive_avg_pool, adaptive_avg_pool_backward, bilinear_resize, bilinear_resize_backward,
    concat_channels, relu, relu_backward, Conv2d, ConvCache, FeatureMap,
};
use crate::rng::{stream_rng, tags};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

/// Architecture description; identical specs build identical networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub role: Role,
    pub channel_widths: Vec<usize>,
    pub num_classes: usize,
    /// Channel count of the exposed pre-logit feature map.
    pub feature_dim: usize,
}

/// Pyramid pooling scales used by the teacher context block.
const PPM_SCALES: [usize; 3] = [1, 2, 4];

impl ModelSpec {
    pub fn teacher_default(num_classes: usize) -> Self {
        ModelSpec {
            role: Role::Teacher,
            channel_widths: vec![12, 16, 24, 24, 32, 32],
            num_classes,
            feature_dim: 24,
        }
    }

    pub fn student_default(num_classes: usize) -> Self {
        ModelSpec {
            role: Role::Student,
            channel_widths: vec![8, 12, 16],
            num_classes,
            feature_dim: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_widths.is_empty() || self.channel_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidSpec(
                "channel_widths must be non-empty and positive".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidSpec("feature_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Features and logits of one forward pass, both at input resolution.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Pre-logit feature map, `feature_dim` channels.
    pub features: FeatureMap,
    /// Class scores, `num_classes` channels.
    pub logits: FeatureMap,
}

#[derive(Debug)]
struct Ppm {
    /// One 1x1 reduction conv per pooling scale.
    branches: Vec<Conv2d>,
    fuse: Conv2d,
}

/// Segmentation network with explicit gradient plumbing.
#[derive(Debug)]
pub struct SegNet {
    pub spec: ModelSpec,
    pub init_seed: u64,
    pub frozen: bool,
    blocks: Vec<Conv2d>,
    ppm: Option<Ppm>,
    classifier: Conv2d,
}

/// Activation cache for one training forward pass.
pub struct SegNetCache {
    block: Vec<(ConvCache, FeatureMap)>,
    ppm: Option<PpmCache>,
    cls: ConvCache,
    low_h: usize,
    low_w: usize,
    out_h: usize,
    out_w: usize,
}

struct PpmCache {
    branches: Vec<(ConvCache, FeatureMap)>,
    fuse: ConvCache,
    fuse_out: FeatureMap,
}

/// Trainable/frozen/total scalar counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub trainable: usize,
    pub frozen: usize,
    pub total: usize,
}

/// Builds a network with deterministic He-uniform initialization.
pub fn build_model(spec: &ModelSpec, init_seed: u64) -> Result<SegNet> {
    spec.validate()?;
    let mut rng = stream_rng(init_seed, tags::MODEL_INIT);
    let mut blocks = Vec::with_capacity(spec.channel_widths.len());
    let mut cin = 3;
    for (i, &cout) in spec.channel_widths.iter().enumerate() {
        let stride = if i < 2 { 2 } else { 1 };
        blocks.push(Conv2d::new(cin, cout, 3, stride, 1, &mut rng));
        cin = cout;
    }
    let last = *spec.channel_widths.last().expect("non-empty");

    let ppm = match spec.role {
        Role::Teacher => {
            let branch_c = (last / 4).max(1);
            let branches = PPM_SCALES
                .iter()
                .map(|_| Conv2d::new(last, branch_c, 1, 1, 0, &mut rng))
                .collect::<Vec<_>>();
            let fuse = Conv2d::new(
                last + PPM_SCALES.len() * branch_c,
                spec.feature_dim,
                3,
                1,
                1,
                &mut rng,
            );
            Some(Ppm { branches, fuse })
        }
        Role::Student => {
            if last != spec.feature_dim {
                return Err(Error::InvalidSpec(format!(
                    "student head expects feature_dim {} but last block emits {} channels",
                    spec.feature_dim, last
                )));
            }
            None
        }
    };

    let classifier = Conv2d::new(spec.feature_dim, spec.num_classes, 1, 1, 0, &mut rng);
    Ok(SegNet {
        spec: spec.clone(),
        init_seed,
        frozen: false,
        blocks,
        ppm,
        classifier,
    })
}

impl SegNet {
    fn convs(&self) -> Vec<&Conv2d> {
        let mut v: Vec<&Conv2d> = self.blocks.iter().collect();
        if let Some(ppm) = &self.ppm {
            v.extend(ppm.branches.iter());
            v.push(&ppm.fuse);
        }
        v.push(&self.classifier);
        v
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut v: Vec<&mut Conv2d> = self.blocks.iter_mut().collect();
        if let Some(ppm) = &mut self.ppm {
            v.extend(ppm.branches.iter_mut());
            v.push(&mut ppm.fuse);
        }
        v.push(&mut self.classifier);
        v
    }

    /// Total number of parameter scalars in the architecture.
    pub fn total_param_count(&self) -> usize {
        self.convs().iter().map(|c| c.param_len()).sum()
    }

    /// Number of trainable scalars (zero when the model is frozen).
    pub fn param_count(&self) -> usize {
        self.param_breakdown().trainable
    }

    pub fn param_breakdown(&self) -> ParamBreakdown {
        let total = self.total_param_count();
        if self.frozen {
            ParamBreakdown {
                trainable: 0,
                frozen: total,
                total,
            }
        } else {
            ParamBreakdown {
                trainable: total,
                frozen: 0,
                total,
            }
        }
    }

    /// Flattens parameters in checkpoint order: blocks, pyramid branches,
    /// fuse, classifier; per conv the `[K, C_out]` weight then the bias.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_param_count());
        for c in self.convs() {
            c.write_params(&mut out);
        }
        out
    }

    pub fn load_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total_param_count() {
            return Err(Error::ShapeMismatch {
                context: "flat parameter payload",
                left: vec![flat.len()],
                right: vec![self.total_param_count()],
            });
        }
        let mut at = 0;
        for c in self.convs_mut() {
            at += c.read_params(&flat[at..]);
        }
        Ok(())
    }

    /// Visits each parameter block (conv weight, conv bias, ...) in
    /// checkpoint order together with its span in the flat layout.
    pub fn for_each_param_slice_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        for c in self.convs_mut() {
            f(c.weight.as_slice_mut().expect("contiguous"));
            f(c.bias.as_slice_mut().expect("contiguous"));
        }
    }

    /// Backbone up to (and including) the context block; output is the
    /// low-resolution pre-upsample feature map.
    pub fn forward_backbone(&self, input: &FeatureMap) -> Result<FeatureMap> {
        let mut h = input.clone();
        for conv in &self.blocks {
            h = relu(&conv.forward(&h)?);
        }
        if let Some(ppm) = &self.ppm {
            let mut parts: Vec<FeatureMap> = vec![h.clone()];
            for (conv, &scale) in ppm.branches.iter().zip(PPM_SCALES.iter()) {
                let pooled = adaptive_avg_pool(&h, scale.min(h.h), scale.min(h.w))?;
                let reduced = relu(&conv.forward(&pooled)?);
                parts.push(bilinear_resize(&reduced, h.h, h.w));
            }
            let refs: Vec<&FeatureMap> = parts.iter().collect();
            h = relu(&ppm.fuse.forward(&concat_channels(&refs))?);
        }
        Ok(h)
    }

    /// Upsamples backbone output to `(out_h, out_w)` and applies the
    /// classifier. Shared by the cached and cache-free paths so cached
    /// teacher activations finalize bit-identically to a full forward.
    pub fn finalize(&self, low: &FeatureMap, out_h: usize, out_w: usize) -> Result<ForwardOutput> {
        let features = bilinear_resize(low, out_h, out_w);
        let logits = self.classifier.forward(&features)?;
        Ok(ForwardOutput { features, logits })
    }

    /// Inference forward pass; no gradient state.
    pub fn forward(&self, input: &FeatureMap) -> Result<ForwardOutput> {
        let low = self.forward_backbone(input)?;
        self.finalize(&low, input.h, input.w)
    }

    /// Forward pass that records activations for [`SegNet::backward`].
    pub fn forward_train(&self, input: &FeatureMap) -> Result<(ForwardOutput, SegNetCache)> {
        let mut block = Vec::with_capacity(self.blocks.len());
        let mut h = input.clone();
        for conv in &self.blocks {
            let (y, cache) = conv.forward_cached(&h)?;
            h = relu(&y);
            block.push((cache, h.clone()));
        }
        let ppm_cache = if let Some(ppm) = &self.ppm {
            let mut parts: Vec<FeatureMap> = vec![h.clone()];
            let mut branches = Vec::with_capacity(ppm.branches.len());
            for (conv, &scale) in ppm.branches.iter().zip(PPM_SCALES.iter()) {
                let pooled = adaptive_avg_pool(&h, scale.min(h.h), scale.min(h.w))?;
                let (y, cache) = conv.forward_cached(&pooled)?;
                let activated = relu(&y);
                parts.push(bilinear_resize(&activated, h.h, h.w));
                branches.push((cache, activated));
            }
            let refs: Vec<&FeatureMap> = parts.iter().collect();
            let (fused, fuse_cache) = ppm.fuse.forward_cached(&concat_channels(&refs))?;
            h = relu(&fused);
            Some(PpmCache {
                branches,
                fuse: fuse_cache,
                fuse_out: h.clone(),
            })
        } else {
            None
        };

        let (low_h, low_w) = h.spatial();
        let features = bilinear_resize(&h, input.h, input.w);
        let (logits, cls_cache) = self.classifier.forward_cached(&features)?;
        Ok((
            ForwardOutput { features, logits },
            SegNetCache {
                block,
                ppm: ppm_cache,
                cls: cls_cache,
                low_h,
                low_w,
                out_h: input.h,
                out_w: input.w,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` (flat layout matching
    /// [`SegNet::flatten_params`]) given gradients on the exposed features
    /// and logits.
    pub fn backward(
        &self,
        cache: &SegNetCache,
        dfeatures: &Array2<f64>,
        dlogits: &Array2<f64>,
        grads: &mut [f64],
    ) {
        debug_assert_eq!(grads.len(), self.total_param_count());
        // Carve the flat gradient buffer into per-conv spans (same order as convs()).
        let lens: Vec<usize> = self.convs().iter().map(|c| c.param_len()).collect();
        let mut spans: Vec<&mut [f64]> = Vec::with_capacity(lens.len());
        let mut rest = grads;
        for len in lens {
            let (head, tail) = rest.split_at_mut(len);
            spans.push(head);
            rest = tail;
        }
        let mut spans = spans.into_iter();
        let mut block_spans: Vec<&mut [f64]> =
            (0..self.blocks.len()).map(|_| spans.next().unwrap()).collect();
        let (mut branch_spans, fuse_span) = if let Some(ppm) = &self.ppm {
            let b: Vec<&mut [f64]> = (0..ppm.branches.len())
                .map(|_| spans.next().unwrap())
                .collect();
            (b, Some(spans.next().unwrap()))
        } else {
            (Vec::new(), None)
        };
        let cls_span = spans.next().unwrap();

        // classifier: dfeatures_total = dfeatures + classifier^T(dlogits)
        let dcls_in = self.classifier.backward(&cache.cls, dlogits, cls_span);
        let dfeat_total = &dcls_in.data + dfeatures;

        // upsample adjoint back to backbone resolution
        let mut dlow = bilinear_resize_backward(
            &dfeat_total,
            cache.low_h,
            cache.low_w,
            cache.out_h,
            cache.out_w,
        )
        .data;

        if let Some(ppm) = &self.ppm {
            let pc = cache.ppm.as_ref().expect("ppm cache");
            let dfused = relu_backward(&dlow, &pc.fuse_out);
            let fuse_span = fuse_span.expect("fuse span");
            let dconcat = ppm.fuse.backward(&pc.fuse, &dfused, fuse_span);
            let last_c = self.blocks.last().expect("blocks").cout;
            let mut dlast = dconcat
                .data
                .slice(ndarray::s![.., 0..last_c])
                .to_owned();
            let mut at = last_c;
            for ((conv, (cache_b, act)), span) in ppm
                .branches
                .iter()
                .zip(pc.branches.iter())
                .zip(branch_spans.iter_mut())
            {
                let c = conv.cout;
                let dpart = dconcat.data.slice(ndarray::s![.., at..at + c]).to_owned();
                at += c;
                let dact =
                    bilinear_resize_backward(&dpart, act.h, act.w, cache.low_h, cache.low_w);
                let dconv_out = relu_backward(&dact.data, act);
                let dpooled = conv.backward(cache_b, &dconv_out, span);
                let dpool_in = adaptive_avg_pool_backward(
                    &dpooled.data,
                    cache.low_h,
                    cache.low_w,
                    dpooled.h,
                    dpooled.w,
                );
                dlast += &dpool_in.data;
            }
            dlow = dlast;
        }

        // backbone blocks in reverse
        for (i, (conv, span)) in self
            .blocks
            .iter()
            .zip(block_spans.iter_mut())
            .enumerate()
            .rev()
        {
            let (conv_cache, act) = &cache.block[i];
            let dconv_out = relu_backward(&dlow, act);
            dlow = conv.backward(conv_cache, &dconv_out, span).data;
        }
    }
}

/// Converts an f32 image tensor to the internal pixel-major layout.
pub fn image_to_map(image: &Array3<f32>) -> FeatureMap {
    let (c, h, w) = image.dim();
    FeatureMap::from_fn(c, h, w, |ci, y, x| f64::from(image[[ci, y, x]]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn random_input(h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        FeatureMap::from_fn(3, h, w, |_, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn single_conv_param_count_formula() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let conv = Conv2d::new(4, 8, 3, 1, 1, &mut rng);
        assert_eq!(conv.param_len(), 8 * (4 * 9 + 1)); // 296
    }

    #[test]
    fn default_student_matches_hand_counted_layer_sum() {
        // Independent per-layer arithmetic: cout*(cin*k*k + 1) per conv.
        let spec = ModelSpec::student_default(6);
        let model = build_model(&spec, 0).unwrap();
        let hand = 8 * (3 * 9 + 1) + 12 * (8 * 9 + 1) + 16 * (12 * 9 + 1) + 6 * (16 + 1);
        assert_eq!(model.total_param_count(), hand);
        assert_eq!(model.param_count(), hand);
    }

    #[test]
    fn default_teacher_matches_hand_counted_layer_sum() {
        let spec = ModelSpec::teacher_default(6);
        let model = build_model(&spec, 0).unwrap();
        let blocks = 12 * (3 * 9 + 1)
            + 16 * (12 * 9 + 1)
            + 24 * (16 * 9 + 1)
            + 24 * (24 * 9 + 1)
            + 32 * (24 * 9 + 1)
            + 32 * (32 * 9 + 1);
        let ppm = 3 * 8 * (32 + 1) + 24 * ((32 + 3 * 8) * 9 + 1);
        let cls = 6 * (24 + 1);
        assert_eq!(model.total_param_count(), blocks + ppm + cls);
    }

    #[test]
    fn capacity_gap_is_at_least_5x() {
        let t = build_model(&ModelSpec::teacher_default(6), 0).unwrap();
        let s = build_model(&ModelSpec::student_default(6), 0).unwrap();
        assert!(t.total_param_count() > s.total_param_count());
        assert!(t.total_param_count() >= 5 * s.total_param_count());
    }

    #[test]
    fn frozen_model_reports_zero_trainable() {
        let mut m = build_model(&ModelSpec::student_default(6), 0).unwrap();
        m.frozen = true;
        let b = m.param_breakdown();
        assert_eq!(b.trainable, 0);
        assert_eq!(b.frozen, b.total);
        assert_eq!(m.param_count(), 0);
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let spec = ModelSpec::teacher_default(6);
        let a = build_model(&spec, 42).unwrap();
        let b = build_model(&spec, 42).unwrap();
        assert_eq!(a.flatten_params(), b.flatten_params());
        let c = build_model(&spec, 43).unwrap();
        assert_ne!(a.flatten_params(), c.flatten_params());
    }

    #[test]
    fn forward_shapes_track_input_resolution() {
        for spec in [ModelSpec::teacher_default(6), ModelSpec::student_default(6)] {
            let model = build_model(&spec, 9).unwrap();
            for (h, w) in [(64, 64), (32, 32)] {
                let out = model.forward(&random_input(h, w, 5)).unwrap();
                assert_eq!(out.features.spatial(), (h, w));
                assert_eq!(out.features.channels(), spec.feature_dim);
                assert_eq!(out.logits.spatial(), (h, w));
                assert_eq!(out.logits.channels(), 6);
            }
        }
    }

    #[test]
    fn feature_dim_mismatch_is_a_construction_error() {
        let mut spec = ModelSpec::student_default(6);
        spec.feature_dim = 20;
        assert!(matches!(build_model(&spec, 0), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn flat_params_round_trip() {
        let spec = ModelSpec::teacher_default(4);
        let a = build_model(&spec, 7).unwrap();
        let mut b = build_model(&spec, 8).unwrap();
        b.load_flat_params(&a.flatten_params()).unwrap();
        assert_eq!(a.flatten_params(), b.flatten_params());
        let wrong = vec![0.0; 3];
        assert!(b.load_flat_params(&wrong).is_err());
    }

    #[test]
    fn cached_finalize_matches_plain_forward() {
        let model = build_model(&ModelSpec::teacher_default(6), 3).unwrap();
        let x = random_input(32, 32, 11);
        let full = model.forward(&x).unwrap();
        let low = model.forward_backbone(&x).unwrap();
        let again = model.finalize(&low, 32, 32).unwrap();
        assert_eq!(full.logits.data, again.logits.data);
        assert_eq!(full.features.data, again.features.data);
    }

    #[test]
    fn backward_matches_finite_differences_on_tiny_net() {
        // End-to-end FD check through upsample, PPM, and classifier.
        let spec = ModelSpec {
            role: Role::Teacher,
            channel_widths: vec![4, 5],
            num_classes: 3,
            feature_dim: 4,
        };
        let model = build_model(&spec, 21).unwrap();
        let x = random_input(8, 8, 13);
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let pf = Array2::from_shape_fn((64, 4), |_| rng.gen_range(-1.0..1.0f64));
        let pl = Array2::from_shape_fn((64, 3), |_| rng.gen_range(-1.0..1.0f64));

        let loss_of = |m: &SegNet| {
            let out = m.forward(&x).unwrap();
            (&out.features.data * &pf).sum() + (&out.logits.data * &pl).sum()
        };

        let (_, cache) = model.forward_train(&x).unwrap();
        let mut grads = vec![0.0; model.total_param_count()];
        model.backward(&cache, &pf, &pl, &mut grads);

        let theta = model.flatten_params();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..theta.len() {
            let mut m2 = build_model(&spec, 21).unwrap();
            let mut t = theta.clone();
            t[i] += eps;
            m2.load_flat_params(&t).unwrap();
            let hi = loss_of(&m2);
            t[i] = theta[i] - eps;
            m2.load_flat_params(&t).unwrap();
            let lo = loss_of(&m2);
            let fd = (hi - lo) / (2.0 * eps);
            let denom = fd.abs().max(grads[i].abs()).max(1e-6);
            worst = worst.max((fd - grads[i]).abs() / denom);
        }
        assert!(worst < 1e-4, "worst relative gradient error {worst}");
    }
}
