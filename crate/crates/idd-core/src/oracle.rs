//! Brute-force reference implementations used by the acceptance suite.
//!
//! Everything here is written as plain nested loops over conventional
//! `[C, H, W]` tensors, deliberately sharing no code with the production
//! paths it checks. Compiled only under the `test-oracles` feature.

use ndarray::{Array2, Array3};

use crate::data::IGNORE_LABEL;

/// Mean feature vector per class by explicit accumulate-and-divide.
pub fn class_tokens(
    features: &Array3<f64>,
    labels: &Array2<u8>,
    num_classes: usize,
) -> Vec<Option<Vec<f64>>> {
    let (c, h, w) = features.dim();
    let mut sums = vec![vec![0.0f64; c]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for y in 0..h {
        for x in 0..w {
            let l = labels[[y, x]];
            if l == IGNORE_LABEL {
                continue;
            }
            let k = l as usize;
            counts[k] += 1;
            for ch in 0..c {
                sums[k][ch] += features[[ch, y, x]];
            }
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| {
            if n == 0 {
                None
            } else {
                Some(s.into_iter().map(|v| v / n as f64).collect())
            }
        })
        .collect()
}

/// Pairwise Euclidean distances by double loop; `None` where either class
/// is absent.
pub fn distance_graph(tokens: &[Option<Vec<f64>>]) -> Vec<Vec<Option<f64>>> {
    let n = tokens.len();
    let mut edges = vec![vec![None; n]; n];
    for i in 0..n {
        edges[i][i] = Some(0.0);
        for j in 0..n {
            if i == j {
                continue;
            }
            if let (Some(a), Some(b)) = (&tokens[i], &tokens[j]) {
                let mut acc = 0.0;
                for (x, y) in a.iter().zip(b) {
                    acc += (x - y) * (x - y);
                }
                edges[i][j] = Some(acc.sqrt());
            }
        }
    }
    edges
}

/// Half the ordered double sum of squared edge differences.
pub fn interclass_loss(teacher: &[Vec<Option<f64>>], student: &[Vec<Option<f64>>]) -> f64 {
    let n = teacher.len();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if let (Some(t), Some(s)) = (teacher[i][j], student[i][j]) {
                acc += (t - s) * (t - s);
            }
        }
    }
    0.5 * acc
}

fn naive_softmax(vals: &[f64], tau: f64) -> Vec<f64> {
    let exps: Vec<f64> = vals.iter().map(|v| (v / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Mean per-pixel KL of temperature-softened class distributions, times
/// tau^2.
pub fn pixelwise_kl(teacher: &Array3<f64>, student: &Array3<f64>, tau: f64) -> f64 {
    let (c, h, w) = teacher.dim();
    let mut acc = 0.0;
    for y in 0..h {
        for x in 0..w {
            let tv: Vec<f64> = (0..c).map(|ch| teacher[[ch, y, x]]).collect();
            let sv: Vec<f64> = (0..c).map(|ch| student[[ch, y, x]]).collect();
            let p = naive_softmax(&tv, tau);
            let q = naive_softmax(&sv, tau);
            for k in 0..c {
                acc += p[k] * (p[k] / q[k]).ln();
            }
        }
    }
    tau * tau * acc / (h * w) as f64
}

/// Channel-mean KL of spatially softmax-normalized maps, times tau^2.
pub fn channelwise_kl(teacher: &Array3<f64>, student: &Array3<f64>, tau: f64) -> f64 {
    let (c, h, w) = teacher.dim();
    let mut acc = 0.0;
    for ch in 0..c {
        let mut tv = Vec::with_capacity(h * w);
        let mut sv = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                tv.push(teacher[[ch, y, x]]);
                sv.push(student[[ch, y, x]]);
            }
        }
        let p = naive_softmax(&tv, tau);
        let q = naive_softmax(&sv, tau);
        for k in 0..p.len() {
            acc += p[k] * (p[k] / q[k]).ln();
        }
    }
    tau * tau * acc / c as f64
}

fn pool_nodes(features: &Array3<f64>, grid: usize) -> Vec<Vec<f64>> {
    let (c, h, w) = features.dim();
    let mut nodes = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        let y0 = gy * h / grid;
        let y1 = ((gy + 1) * h + grid - 1) / grid;
        for gx in 0..grid {
            let x0 = gx * w / grid;
            let x1 = ((gx + 1) * w + grid - 1) / grid;
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            let mut v = vec![0.0f64; c];
            for y in y0..y1 {
                for x in x0..x1 {
                    for ch in 0..c {
                        v[ch] += features[[ch, y, x]];
                    }
                }
            }
            for val in v.iter_mut() {
                *val /= count;
            }
            nodes.push(v);
        }
    }
    nodes
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / ((na + 1e-12) * (nb + 1e-12))
}

/// Mean squared cosine-similarity mismatch over pooled node pairs.
pub fn pairwise_affinity(teacher: &Array3<f64>, student: &Array3<f64>, grid: usize) -> f64 {
    let tn = pool_nodes(teacher, grid);
    let sn = pool_nodes(student, grid);
    let s2 = grid * grid;
    let mut acc = 0.0;
    for i in 0..s2 {
        for j in 0..s2 {
            let d = cosine(&tn[i], &tn[j]) - cosine(&sn[i], &sn[j]);
            acc += d * d;
        }
    }
    acc / (s2 * s2) as f64
}

/// Mean `-ln softmax(logits)[label]` over non-IGNORE pixels.
pub fn cross_entropy(logits: &Array3<f64>, labels: &Array2<u8>) -> f64 {
    let (c, h, w) = logits.dim();
    let mut acc = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let l = labels[[y, x]];
            if l == IGNORE_LABEL {
                continue;
            }
            let v: Vec<f64> = (0..c).map(|ch| logits[[ch, y, x]]).collect();
            let p = naive_softmax(&v, 1.0);
            acc -= p[l as usize].ln();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        acc / count as f64
    }
}

/// Per-pixel counting loop; returns `(counts[gt][pred], ignored)`.
pub fn confusion(
    predictions: &Array2<u8>,
    labels: &Array2<u8>,
    num_classes: usize,
) -> (Vec<Vec<u64>>, u64) {
    let mut counts = vec![vec![0u64; num_classes]; num_classes];
    let mut ignored = 0u64;
    for (&p, &g) in predictions.iter().zip(labels.iter()) {
        if g == IGNORE_LABEL {
            ignored += 1;
        } else {
            counts[g as usize][p as usize] += 1;
        }
    }
    (counts, ignored)
}

/// IoU per class from the raw formula; `None` where undefined.
pub fn iou(counts: &[Vec<u64>]) -> (Vec<Option<f64>>, f64) {
    let n = counts.len();
    let mut per_class = Vec::with_capacity(n);
    let mut sum = 0.0;
    let mut defined = 0usize;
    for c in 0..n {
        let tp = counts[c][c];
        let row: u64 = counts[c].iter().sum();
        let col: u64 = (0..n).map(|i| counts[i][c]).sum();
        let denom = row + col - tp;
        if denom == 0 {
            per_class.push(None);
        } else {
            let v = tp as f64 / denom as f64;
            per_class.push(Some(v));
            sum += v;
            defined += 1;
        }
    }
    (per_class, if defined > 0 { sum / defined as f64 } else { 0.0 })
}
