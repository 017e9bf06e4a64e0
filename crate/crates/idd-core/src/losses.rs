//! Cross-entropy, distillation losses, and the composite objective.
//!
//! Every distillation term treats the teacher side as a constant; gradient
//! functions return derivatives with respect to student inputs only. The
//! composite total is always `l_tar + l_skd + l1*l_cw + l2*l_id + l3*l_pi`
//! evaluated in that exact order, and a disabled term contributes a literal
//! zero without being computed.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::IGNORE_LABEL;
use crate::error::{Error, Result};
use crate::interclass::{
    compute_class_tokens, compute_distance_graph, interclass_distance_loss,
};
use crate::models::ForwardOutput;
use crate::nn::{adaptive_avg_pool, adaptive_avg_pool_backward, FeatureMap};
use crate::position::{make_scaled_targets, position_info_loss, PositionHead, PositionMasks};

/// Where the position loss takes its reference masks from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PiTarget {
    /// Distill toward the teacher head's predicted masks.
    Teacher,
    /// Regress toward the analytic coordinate ramps instead.
    Analytic,
}

/// Weights, temperatures, and toggles of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the channel-wise KD term.
    pub lambda1: f64,
    /// Weight of the inter-class distance term.
    pub lambda2: f64,
    /// Weight of the position-information term.
    pub lambda3: f64,
    pub tau_pixel: f64,
    pub tau_channel: f64,
    pub enable_skd: bool,
    pub enable_cw: bool,
    pub enable_id: bool,
    pub enable_pi: bool,
    /// Node-grid side length for the pair-wise affinity half of the
    /// structured KD term.
    pub affinity_grid: usize,
    pub pi_target: PiTarget,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 3.0,
            lambda2: 1.0,
            lambda3: 1.0,
            tau_pixel: 1.0,
            tau_channel: 4.0,
            enable_skd: true,
            enable_cw: true,
            enable_id: true,
            enable_pi: true,
            affinity_grid: 8,
            pi_target: PiTarget::Teacher,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.tau_pixel <= 0.0 || self.tau_channel <= 0.0 {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if self.affinity_grid == 0 {
            return Err(Error::Config("affinity_grid must be positive".into()));
        }
        Ok(())
    }

    /// All distillation terms off; plain supervised training.
    pub fn all_off() -> Self {
        LossWeights {
            enable_skd: false,
            enable_cw: false,
            enable_id: false,
            enable_pi: false,
            ..LossWeights::default()
        }
    }

    /// Named term combinations matching the ablation rows.
    pub fn preset(name: &str) -> Option<Self> {
        let mut w = LossWeights::all_off();
        match name {
            "baseline" => {}
            "skd" => w.enable_skd = true,
            "skd-cw" => {
                w.enable_skd = true;
                w.enable_cw = true;
            }
            "skd-cw-id" => {
                w.enable_skd = true;
                w.enable_cw = true;
                w.enable_id = true;
            }
            "skd-cw-pi" => {
                w.enable_skd = true;
                w.enable_cw = true;
                w.enable_pi = true;
            }
            "full-idd" => w = LossWeights::default(),
            _ => return None,
        }
        Some(w)
    }

    pub fn preset_names() -> [&'static str; 6] {
        ["baseline", "skd", "skd-cw", "skd-cw-id", "skd-cw-pi", "full-idd"]
    }
}

/// Per-term loss values plus the composed total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_tar: f64,
    pub l_skd: f64,
    pub l_cw: f64,
    pub l_id: f64,
    pub l_pi: f64,
    pub total: f64,
}

/// The one composition rule: fixed term order, fixed floating evaluation
/// order, so equal parts always give bit-equal totals.
pub fn compose_total(
    l_tar: f64,
    l_skd: f64,
    l_cw: f64,
    l_id: f64,
    l_pi: f64,
    w: &LossWeights,
) -> f64 {
    l_tar + l_skd + w.lambda1 * l_cw + w.lambda2 * l_id + w.lambda3 * l_pi
}

impl LossBreakdown {
    pub fn from_parts(l_tar: f64, l_skd: f64, l_cw: f64, l_id: f64, l_pi: f64, w: &LossWeights) -> Self {
        LossBreakdown {
            l_tar,
            l_skd,
            l_cw,
            l_id,
            l_pi,
            total: compose_total(l_tar, l_skd, l_cw, l_id, l_pi, w),
        }
    }
}

fn check_same_shape(a: &FeatureMap, b: &FeatureMap, context: &'static str) -> Result<()> {
    if a.spatial() != b.spatial() || a.channels() != b.channels() {
        return Err(Error::ShapeMismatch {
            context,
            left: vec![a.channels(), a.h, a.w],
            right: vec![b.channels(), b.h, b.w],
        });
    }
    Ok(())
}

/// Row-wise log-softmax of `x / tau` into a fresh array.
fn log_softmax_rows(x: &Array2<f64>, tau: f64) -> Array2<f64> {
    let mut out = x.mapv(|v| v / tau);
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v -= max;
            sum += v.exp();
        }
        let ln_sum = sum.ln();
        for v in row.iter_mut() {
            *v -= ln_sum;
        }
    }
    out
}

/// Cross-entropy value plus a marker for batches without labeled pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CeLoss {
    pub value: f64,
    /// True when every pixel was IGNORE; the value is zero by convention.
    pub degenerate: bool,
}

/// Mean over non-IGNORE pixels of `-log softmax(logits)[label]`.
pub fn cross_entropy_target_loss(logits: &FeatureMap, labels: &Array2<u8>) -> Result<CeLoss> {
    Ok(ce_impl(logits, labels, false)?.0)
}

/// Cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_with_grad(
    logits: &FeatureMap,
    labels: &Array2<u8>,
) -> Result<(CeLoss, Array2<f64>)> {
    let (loss, grad) = ce_impl(logits, labels, true)?;
    Ok((loss, grad.expect("grad requested")))
}

fn ce_impl(
    logits: &FeatureMap,
    labels: &Array2<u8>,
    want_grad: bool,
) -> Result<(CeLoss, Option<Array2<f64>>)> {
    if logits.spatial() != labels.dim() {
        return Err(Error::ShapeMismatch {
            context: "logits vs labels",
            left: vec![logits.h, logits.w],
            right: vec![labels.dim().0, labels.dim().1],
        });
    }
    let n = logits.channels();
    let lsm = log_softmax_rows(&logits.data, 1.0);
    let labels_flat = labels.as_slice().expect("standard layout");
    let valid = labels_flat.iter().filter(|&&l| l != IGNORE_LABEL).count();
    let mut grad = want_grad.then(|| Array2::<f64>::zeros(logits.data.raw_dim()));
    if valid == 0 {
        return Ok((
            CeLoss {
                value: 0.0,
                degenerate: true,
            },
            grad,
        ));
    }
    let inv = 1.0 / valid as f64;
    let mut value = 0.0;
    for (p, &label) in labels_flat.iter().enumerate() {
        if label == IGNORE_LABEL {
            continue;
        }
        let c = label as usize;
        if c >= n {
            return Err(Error::InvalidLabel {
                label,
                num_classes: n,
            });
        }
        value -= lsm[[p, c]];
        if let Some(g) = grad.as_mut() {
            for k in 0..n {
                g[[p, k]] += (lsm[[p, k]].exp() - f64::from(k == c)) * inv;
            }
        }
    }
    Ok((
        CeLoss {
            value: value * inv,
            degenerate: false,
        },
        grad,
    ))
}

/// Mean over pixels of `KL(softmax(t/tau) || softmax(s/tau)) * tau^2`.
pub fn pixelwise_kd_loss(teacher: &FeatureMap, student: &FeatureMap, tau: f64) -> Result<f64> {
    Ok(pixelwise_impl(teacher, student, tau, false)?.0)
}

pub fn pixelwise_kd_with_grad(
    teacher: &FeatureMap,
    student: &FeatureMap,
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    let (v, g) = pixelwise_impl(teacher, student, tau, true)?;
    Ok((v, g.expect("grad requested")))
}

fn pixelwise_impl(
    teacher: &FeatureMap,
    student: &FeatureMap,
    tau: f64,
    want_grad: bool,
) -> Result<(f64, Option<Array2<f64>>)> {
    check_same_shape(teacher, student, "pixelwise KD logits")?;
    let pixels = teacher.data.nrows();
    let lt = log_softmax_rows(&teacher.data, tau);
    let ls = log_softmax_rows(&student.data, tau);
    let mut value = 0.0;
    let mut grad = want_grad.then(|| Array2::<f64>::zeros(student.data.raw_dim()));
    let gscale = tau / pixels as f64;
    for p in 0..pixels {
        for c in 0..teacher.channels() {
            let tp = lt[[p, c]].exp();
            if tp > 0.0 {
                value += tp * (lt[[p, c]] - ls[[p, c]]);
            }
            if let Some(g) = grad.as_mut() {
                g[[p, c]] = gscale * (ls[[p, c]].exp() - tp);
            }
        }
    }
    Ok((value * tau * tau / pixels as f64, grad))
}

/// Per-channel KL of spatially softmax-normalized maps:
/// `tau^2 / N * sum_n KL(spatial_softmax(t_n/tau) || spatial_softmax(s_n/tau))`.
pub fn channelwise_kd_loss(teacher: &FeatureMap, student: &FeatureMap, tau: f64) -> Result<f64> {
    Ok(channelwise_impl(teacher, student, tau, false)?.0)
}

pub fn channelwise_kd_with_grad(
    teacher: &FeatureMap,
    student: &FeatureMap,
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    let (v, g) = channelwise_impl(teacher, student, tau, true)?;
    Ok((v, g.expect("grad requested")))
}

/// Log-softmax over one strided lane (a channel's flattened spatial map).
fn log_softmax_lane(lane: ndarray::ArrayView1<f64>, tau: f64) -> Vec<f64> {
    let mut out: Vec<f64> = lane.iter().map(|&v| v / tau).collect();
    let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in out.iter_mut() {
        *v -= max;
        sum += v.exp();
    }
    let ln_sum = sum.ln();
    for v in out.iter_mut() {
        *v -= ln_sum;
    }
    out
}

fn channelwise_impl(
    teacher: &FeatureMap,
    student: &FeatureMap,
    tau: f64,
    want_grad: bool,
) -> Result<(f64, Option<Array2<f64>>)> {
    check_same_shape(teacher, student, "channelwise KD logits")?;
    let n = teacher.channels();
    let mut value = 0.0;
    let mut grad = want_grad.then(|| Array2::<f64>::zeros(student.data.raw_dim()));
    let gscale = tau / n as f64;
    for c in 0..n {
        let lt = log_softmax_lane(teacher.data.column(c), tau);
        let ls = log_softmax_lane(student.data.column(c), tau);
        for p in 0..lt.len() {
            let tp = lt[p].exp();
            if tp > 0.0 {
                value += tp * (lt[p] - ls[p]);
            }
            if let Some(g) = grad.as_mut() {
                g[[p, c]] = gscale * (ls[p].exp() - tp);
            }
        }
    }
    Ok((value * tau * tau / n as f64, grad))
}

const COSINE_EPS: f64 = 1e-12;

/// Mean squared difference between teacher and student cosine-similarity
/// matrices over a pooled `grid x grid` node set.
pub fn pairwise_affinity_loss(
    teacher_features: &FeatureMap,
    student_features: &FeatureMap,
    grid: usize,
) -> Result<f64> {
    Ok(pairwise_impl(teacher_features, student_features, grid, false)?.0)
}

pub fn pairwise_affinity_with_grad(
    teacher_features: &FeatureMap,
    student_features: &FeatureMap,
    grid: usize,
) -> Result<(f64, FeatureMap)> {
    let (v, g) = pairwise_impl(teacher_features, student_features, grid, true)?;
    Ok((v, g.expect("grad requested")))
}

fn cosine_matrix(nodes: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let s2 = nodes.nrows();
    let norms: Vec<f64> = (0..s2)
        .map(|i| {
            let r = nodes.row(i);
            r.dot(&r).sqrt()
        })
        .collect();
    let mut sim = Array2::<f64>::zeros((s2, s2));
    for i in 0..s2 {
        for j in 0..s2 {
            let dot = nodes.row(i).dot(&nodes.row(j));
            sim[[i, j]] = dot / ((norms[i] + COSINE_EPS) * (norms[j] + COSINE_EPS));
        }
    }
    (sim, norms)
}

fn pairwise_impl(
    teacher_features: &FeatureMap,
    student_features: &FeatureMap,
    grid: usize,
    want_grad: bool,
) -> Result<(f64, Option<FeatureMap>)> {
    if teacher_features.spatial() != student_features.spatial() {
        return Err(Error::ShapeMismatch {
            context: "pairwise affinity feature grids",
            left: vec![teacher_features.h, teacher_features.w],
            right: vec![student_features.h, student_features.w],
        });
    }
    if grid > teacher_features.h || grid > teacher_features.w {
        return Err(Error::ShapeMismatch {
            context: "affinity node grid exceeds feature grid",
            left: vec![grid, grid],
            right: vec![teacher_features.h, teacher_features.w],
        });
    }
    let t_nodes = adaptive_avg_pool(teacher_features, grid, grid)?;
    let s_nodes = adaptive_avg_pool(student_features, grid, grid)?;
    let (at, _) = cosine_matrix(&t_nodes.data);
    let (asim, s_norms) = cosine_matrix(&s_nodes.data);
    let s2 = grid * grid;
    let count = (s2 * s2) as f64;
    let mut value = 0.0;
    for i in 0..s2 {
        for j in 0..s2 {
            let d = at[[i, j]] - asim[[i, j]];
            value += d * d;
        }
    }
    value /= count;

    let grad = if want_grad {
        // dL/dA[i][j] = 2 (A_S - A_T) / count; push through the cosine and
        // then the average pooling.
        let mut dnodes = Array2::<f64>::zeros(s_nodes.data.raw_dim());
        for i in 0..s2 {
            for j in 0..s2 {
                if i == j {
                    continue; // cos(v,v) == 1 identically
                }
                // node i is hit through both A[i,j] and the equal A[j,i]
                let g = 4.0 * (asim[[i, j]] - at[[i, j]]) / count;
                if g == 0.0 {
                    continue;
                }
                let denom = (s_norms[i] + COSINE_EPS) * (s_norms[j] + COSINE_EPS);
                let vi = s_nodes.data.row(i);
                let vj = s_nodes.data.row(j);
                let dot = vi.dot(&vj);
                for c in 0..vi.len() {
                    let mut gi = vj[c] / denom;
                    if s_norms[i] > 0.0 {
                        gi -= dot * vi[c]
                            / (s_norms[i] * (s_norms[i] + COSINE_EPS) * denom);
                    }
                    dnodes[[i, c]] += g * gi;
                }
            }
        }
        Some(adaptive_avg_pool_backward(
            &dnodes,
            student_features.h,
            student_features.w,
            grid,
            grid,
        ))
    } else {
        None
    };
    Ok((value, grad))
}

/// Reference masks the student's predictions are pulled toward: the
/// teacher head's predictions, or the analytic ramps (precomputed ramps
/// may be passed to avoid rebuilding them per sample).
pub fn position_reference_masks(
    weights: &LossWeights,
    teacher_head: &PositionHead,
    teacher_out: &ForwardOutput,
    analytic: Option<&PositionMasks>,
) -> Result<PositionMasks> {
    match weights.pi_target {
        PiTarget::Teacher => teacher_head.forward(&teacher_out.features),
        PiTarget::Analytic => match analytic {
            Some(m) => Ok(m.clone()),
            None => make_scaled_targets(teacher_out.features.h, teacher_out.features.w),
        },
    }
}

/// Composite objective outcome; the flags surface degenerate conditions
/// the trainer counts and logs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TotalLoss {
    pub breakdown: LossBreakdown,
    pub degenerate_target: bool,
    pub degenerate_graph: bool,
    pub zero_vectors: usize,
}

/// Evaluates every enabled term for one teacher/student output pair.
///
/// `heads` is `(teacher_head, student_head)` and must be present exactly
/// when the position term is enabled.
pub fn total_loss(
    outputs_t: &ForwardOutput,
    outputs_s: &ForwardOutput,
    labels: &Array2<u8>,
    heads: Option<(&PositionHead, &PositionHead)>,
    weights: &LossWeights,
) -> Result<TotalLoss> {
    weights.validate()?;
    if weights.enable_pi && heads.is_none() {
        return Err(Error::Config(
            "position loss enabled but no position heads were supplied".into(),
        ));
    }
    let n = outputs_s.logits.channels();
    let ce = cross_entropy_target_loss(&outputs_s.logits, labels)?;
    let mut l_skd = 0.0;
    let mut l_cw = 0.0;
    let mut l_id = 0.0;
    let mut l_pi = 0.0;
    let mut degenerate_graph = false;
    let mut zero_vectors = 0;

    if weights.enable_skd {
        l_skd = pixelwise_kd_loss(&outputs_t.logits, &outputs_s.logits, weights.tau_pixel)?
            + pairwise_affinity_loss(
                &outputs_t.features,
                &outputs_s.features,
                weights.affinity_grid,
            )?;
    }
    if weights.enable_cw {
        l_cw = channelwise_kd_loss(&outputs_t.logits, &outputs_s.logits, weights.tau_channel)?;
    }
    if weights.enable_id {
        let tg = compute_distance_graph(
            &compute_class_tokens(&outputs_t.features, labels, n)?,
            n,
        )?;
        let sg = compute_distance_graph(
            &compute_class_tokens(&outputs_s.features, labels, n)?,
            n,
        )?;
        let id = interclass_distance_loss(&tg, &sg)?;
        l_id = id.value;
        degenerate_graph = id.degenerate;
    }
    if weights.enable_pi {
        let (teacher_head, student_head) = heads.expect("checked above");
        let student_masks = student_head.forward(&outputs_s.features)?;
        let reference = position_reference_masks(weights, teacher_head, outputs_t, None)?;
        let pi = position_info_loss(&reference, &student_masks)?;
        l_pi = pi.value;
        zero_vectors = pi.zero_vectors;
    }

    Ok(TotalLoss {
        breakdown: LossBreakdown::from_parts(ce.value, l_skd, l_cw, l_id, l_pi, weights),
        degenerate_target: ce.degenerate,
        degenerate_graph,
        zero_vectors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn map_from(rows: usize, vals: Vec<Vec<f64>>) -> FeatureMap {
        // one-pixel-per-row helper: `rows` pixels laid out 1 x rows
        let channels = vals[0].len();
        let mut m = FeatureMap::zeros(channels, 1, rows);
        for (p, v) in vals.iter().enumerate() {
            for (c, &x) in v.iter().enumerate() {
                m.data[[p, c]] = x;
            }
        }
        m
    }

    fn random_map(c: usize, h: usize, w: usize, rng: &mut ChaCha12Rng) -> FeatureMap {
        FeatureMap::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.5..1.5))
    }

    #[test]
    fn ce_uniform_two_class_is_ln2() {
        let logits = map_from(1, vec![vec![0.3, 0.3]]);
        let labels = Array2::from_elem((1, 1), 0u8);
        let l = cross_entropy_target_loss(&logits, &labels).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ce_confident_correct_prediction_tends_to_zero() {
        let labels = Array2::from_elem((1, 1), 0u8);
        let mut prev = f64::INFINITY;
        for gap in [1.0, 4.0, 16.0, 64.0] {
            let logits = map_from(1, vec![vec![gap, 0.0]]);
            let l = cross_entropy_target_loss(&logits, &labels).unwrap().value;
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn ce_all_ignore_is_degenerate_zero() {
        let logits = map_from(2, vec![vec![1.0, 2.0], vec![0.0, 1.0]]);
        let labels = Array2::from_elem((1, 2), IGNORE_LABEL);
        let l = cross_entropy_target_loss(&logits, &labels).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.degenerate);
    }

    #[test]
    fn ce_matches_per_pixel_softmax_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let logits = random_map(3, 2, 2, &mut rng);
        let labels = Array2::from_shape_fn((2, 2), |_| rng.gen_range(0..3u8));
        let got = cross_entropy_target_loss(&logits, &labels).unwrap().value;
        let mut want = 0.0;
        for y in 0..2 {
            for x in 0..2 {
                let row: Vec<f64> = (0..3).map(|c| logits.get(c, y, x)).collect();
                let denom: f64 = row.iter().map(|v| v.exp()).sum();
                let p = row[labels[[y, x]] as usize].exp() / denom;
                want -= p.ln();
            }
        }
        want /= 4.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn pixelwise_identical_logits_is_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let t = random_map(4, 3, 3, &mut rng);
        let l = pixelwise_kd_loss(&t, &t, 2.0).unwrap();
        assert!(l.abs() < 1e-15);
    }

    #[test]
    fn pixelwise_hand_anchor() {
        // teacher probs (0.5, 0.5), student probs (0.25, 0.75), tau = 1
        let t = map_from(1, vec![vec![0.0, 0.0]]);
        let s = map_from(1, vec![vec![0.0, 3.0f64.ln()]]);
        let l = pixelwise_kd_loss(&t, &s, 1.0).unwrap();
        let want = 0.5 * 2.0f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((l - want).abs() < 1e-12, "{l} vs {want}");
        assert!((l - 0.143841).abs() < 1e-6);
    }

    #[test]
    fn pixelwise_matches_kl_loop_oracle_and_is_nonnegative() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..100 {
            let t = random_map(3, 2, 3, &mut rng);
            let s = random_map(3, 2, 3, &mut rng);
            let tau = rng.gen_range(0.5..4.0);
            let got = pixelwise_kd_loss(&t, &s, tau).unwrap();
            let mut want = 0.0;
            for p in 0..6 {
                let tp: Vec<f64> = (0..3).map(|c| (t.data[[p, c]] / tau).exp()).collect();
                let sp: Vec<f64> = (0..3).map(|c| (s.data[[p, c]] / tau).exp()).collect();
                let zt: f64 = tp.iter().sum();
                let zs: f64 = sp.iter().sum();
                for c in 0..3 {
                    let pt = tp[c] / zt;
                    let ps = sp[c] / zs;
                    want += pt * (pt / ps).ln();
                }
            }
            want *= tau * tau / 6.0;
            assert!(got >= -1e-15);
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn channelwise_hand_anchor() {
        // one channel, two pixels: teacher (0,0) -> (0.5,0.5);
        // student (0, ln 3) -> (0.25, 0.75); tau = 1
        let t = map_from(2, vec![vec![0.0], vec![0.0]]);
        let s = map_from(2, vec![vec![0.0], vec![3.0f64.ln()]]);
        let l = channelwise_kd_loss(&t, &s, 1.0).unwrap();
        let want = 0.5 * 2.0f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((l - want).abs() < 1e-12);
    }

    #[test]
    fn channelwise_teacher_distribution_normalizes() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let t = random_map(4, 5, 5, &mut rng);
        for c in 0..4 {
            let lane = log_softmax_lane(t.data.column(c), 4.0);
            let sum: f64 = lane.iter().map(|&v| v.exp()).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn channelwise_matches_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        for _ in 0..100 {
            let t = random_map(2, 3, 3, &mut rng);
            let s = random_map(2, 3, 3, &mut rng);
            let tau = rng.gen_range(0.5..5.0);
            let got = channelwise_kd_loss(&t, &s, tau).unwrap();
            let mut want = 0.0;
            for c in 0..2 {
                let tv: Vec<f64> = (0..9).map(|p| (t.data[[p, c]] / tau).exp()).collect();
                let sv: Vec<f64> = (0..9).map(|p| (s.data[[p, c]] / tau).exp()).collect();
                let zt: f64 = tv.iter().sum();
                let zs: f64 = sv.iter().sum();
                for p in 0..9 {
                    let pt = tv[p] / zt;
                    let ps = sv[p] / zs;
                    want += pt * (pt / ps).ln();
                }
            }
            want *= tau * tau / 2.0;
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn unscaled_divergence_vanishes_at_large_temperature() {
        // The tau^2-scaled KD value converges to a scaled logit-matching
        // penalty; the underlying divergence itself must vanish.
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let t = random_map(4, 4, 4, &mut rng);
        let s = random_map(4, 4, 4, &mut rng);
        let tau = 1e4;
        let px = pixelwise_kd_loss(&t, &s, tau).unwrap() / (tau * tau);
        let cw = channelwise_kd_loss(&t, &s, tau).unwrap() / (tau * tau);
        assert!(px < 1e-4, "pixelwise divergence {px}");
        assert!(cw < 1e-4, "channelwise divergence {cw}");
    }

    #[test]
    fn affinity_identical_and_scaled_features_are_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let t = random_map(5, 8, 8, &mut rng);
        let same = pairwise_affinity_loss(&t, &t, 4).unwrap();
        assert!(same.abs() < 1e-15);
        let s = FeatureMap {
            data: &t.data * 3.25,
            h: t.h,
            w: t.w,
        };
        let scaled = pairwise_affinity_loss(&t, &s, 4).unwrap();
        assert!(scaled.abs() < 1e-12, "{scaled}");
    }

    #[test]
    fn affinity_matches_double_loop_cosine_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for _ in 0..50 {
            let t = random_map(3, 4, 4, &mut rng);
            let s = random_map(2, 4, 4, &mut rng);
            let got = pairwise_affinity_loss(&t, &s, 2).unwrap();

            let pool = |f: &FeatureMap| {
                let mut nodes = vec![vec![0.0; f.channels()]; 4];
                for (bi, (y0, y1, x0, x1)) in
                    [(0, 2, 0, 2), (0, 2, 2, 4), (2, 4, 0, 2), (2, 4, 2, 4)]
                        .iter()
                        .enumerate()
                        .map(|(i, &(a, b, c, d))| (i, (a, b, c, d)))
                {
                    for y in y0..y1 {
                        for x in x0..x1 {
                            for ch in 0..f.channels() {
                                nodes[bi][ch] += f.get(ch, y, x) / 4.0;
                            }
                        }
                    }
                }
                nodes
            };
            let cos = |a: &Vec<f64>, b: &Vec<f64>| {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                dot / ((na + 1e-12) * (nb + 1e-12))
            };
            let tn = pool(&t);
            let sn = pool(&s);
            let mut want = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    let d = cos(&tn[i], &tn[j]) - cos(&sn[i], &sn[j]);
                    want += d * d;
                }
            }
            want /= 16.0;
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn affinity_grid_too_large_is_an_error() {
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        let t = random_map(2, 4, 4, &mut rng);
        assert!(pairwise_affinity_loss(&t, &t, 5).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let eps = 1e-5;
        let check = |analytic: &Array2<f64>, f: &mut dyn FnMut(&Array2<f64>) -> f64, x: &Array2<f64>, what: &str| {
            for idx in 0..x.len() {
                let mut xp = x.clone();
                xp.as_slice_mut().unwrap()[idx] += eps;
                let hi = f(&xp);
                xp.as_slice_mut().unwrap()[idx] = x.as_slice().unwrap()[idx] - eps;
                let lo = f(&xp);
                let fd = (hi - lo) / (2.0 * eps);
                let g = analytic.as_slice().unwrap()[idx];
                let denom = fd.abs().max(g.abs()).max(1e-6);
                assert!((fd - g).abs() / denom < 1e-4, "{what}[{idx}]: {g} vs {fd}");
            }
        };

        // cross-entropy
        let logits = random_map(3, 2, 2, &mut rng);
        let labels = Array2::from_shape_fn((2, 2), |_| rng.gen_range(0..3u8));
        let (_, g) = cross_entropy_with_grad(&logits, &labels).unwrap();
        check(
            &g,
            &mut |d| {
                let m = FeatureMap { data: d.clone(), h: 2, w: 2 };
                cross_entropy_target_loss(&m, &labels).unwrap().value
            },
            &logits.data,
            "ce",
        );

        // pixelwise KD
        let t = random_map(3, 2, 2, &mut rng);
        let s = random_map(3, 2, 2, &mut rng);
        let (_, g) = pixelwise_kd_with_grad(&t, &s, 2.5).unwrap();
        check(
            &g,
            &mut |d| {
                let m = FeatureMap { data: d.clone(), h: 2, w: 2 };
                pixelwise_kd_loss(&t, &m, 2.5).unwrap()
            },
            &s.data,
            "pixelwise",
        );

        // channelwise KD
        let (_, g) = channelwise_kd_with_grad(&t, &s, 3.0).unwrap();
        check(
            &g,
            &mut |d| {
                let m = FeatureMap { data: d.clone(), h: 2, w: 2 };
                channelwise_kd_loss(&t, &m, 3.0).unwrap()
            },
            &s.data,
            "channelwise",
        );

        // pairwise affinity
        let ft = random_map(3, 4, 4, &mut rng);
        let fs = random_map(2, 4, 4, &mut rng);
        let (_, g) = pairwise_affinity_with_grad(&ft, &fs, 2).unwrap();
        check(
            &g.data.clone(),
            &mut |d| {
                let m = FeatureMap { data: d.clone(), h: 4, w: 4 };
                pairwise_affinity_loss(&ft, &m, 2).unwrap()
            },
            &fs.data,
            "affinity",
        );
    }

    #[test]
    fn total_loss_composition_and_toggles() {
        use crate::models::{build_model, ModelSpec};
        let teacher = build_model(&ModelSpec::teacher_default(4), 1).unwrap();
        let student = build_model(&ModelSpec::student_default(4), 2).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(37);
        let img = FeatureMap::from_fn(3, 16, 16, |_, _, _| rng.gen_range(0.0..1.0));
        let labels = Array2::from_shape_fn((16, 16), |_| rng.gen_range(0..4u8));
        let to = teacher.forward(&img).unwrap();
        let so = student.forward(&img).unwrap();
        let th = PositionHead::new(teacher.spec.feature_dim, 4, 3);
        let sh = PositionHead::new(student.spec.feature_dim, 4, 4);

        let w = LossWeights {
            affinity_grid: 4,
            ..LossWeights::default()
        };
        let full = total_loss(&to, &so, &labels, Some((&th, &sh)), &w).unwrap();
        let b = full.breakdown;
        assert_eq!(
            b.total,
            b.l_tar + b.l_skd + w.lambda1 * b.l_cw + w.lambda2 * b.l_id + w.lambda3 * b.l_pi
        );

        // recompute each component independently
        let ce = cross_entropy_target_loss(&so.logits, &labels).unwrap().value;
        assert_eq!(ce, b.l_tar);
        let skd = pixelwise_kd_loss(&to.logits, &so.logits, w.tau_pixel).unwrap()
            + pairwise_affinity_loss(&to.features, &so.features, 4).unwrap();
        assert_eq!(skd, b.l_skd);

        // all toggles off: total == l_tar, everything else literal zero
        let off = total_loss(&to, &so, &labels, None, &LossWeights::all_off()).unwrap();
        assert_eq!(off.breakdown.total, off.breakdown.l_tar);
        assert_eq!(off.breakdown.l_skd, 0.0);
        assert_eq!(off.breakdown.l_cw, 0.0);
        assert_eq!(off.breakdown.l_id, 0.0);
        assert_eq!(off.breakdown.l_pi, 0.0);

        // enable_pi without heads is a configuration error
        let mut pi_only = LossWeights::all_off();
        pi_only.enable_pi = true;
        assert!(matches!(
            total_loss(&to, &so, &labels, None, &pi_only),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn arithmetic_contract_of_compose_total() {
        let w = LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            ..LossWeights::default()
        };
        assert_eq!(compose_total(1.0, 2.0, 3.0, 4.0, 5.0, &w), 15.0);
    }

    #[test]
    fn presets_cover_the_ablation_rows() {
        let rows: Vec<[bool; 4]> = LossWeights::preset_names()
            .iter()
            .map(|n| {
                let w = LossWeights::preset(n).unwrap();
                [w.enable_skd, w.enable_cw, w.enable_id, w.enable_pi]
            })
            .collect();
        assert_eq!(
            rows,
            vec![
                [false, false, false, false],
                [true, false, false, false],
                [true, true, false, false],
                [true, true, true, false],
                [true, true, false, true],
                [true, true, true, true],
            ]
        );
        assert!(LossWeights::preset("nope").is_none());
    }
}
