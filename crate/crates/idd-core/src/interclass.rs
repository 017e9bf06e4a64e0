//! Class tokens, the inter-class distance graph, and the distance loss.
//!
//! A class token is the mean feature vector over all pixels carrying that
//! label; the graph edge between two present classes is the Euclidean
//! distance between their tokens. The loss matches student edge lengths to
//! teacher edge lengths with squared differences. Classes absent from the
//! labels have no token and their edges are excluded everywhere.

use ndarray::{Array1, Array2};

use crate::data::IGNORE_LABEL;
use crate::error::{Error, Result};
use crate::nn::FeatureMap;

/// Per-class mean feature vectors over a label map (or a pooled batch).
#[derive(Debug, Clone)]
pub struct ClassTokenSet {
    /// Token dimension (feature channel count).
    pub dim: usize,
    /// `tokens[c]` is `Some` exactly when class `c` has at least one
    /// contributing pixel.
    pub tokens: Vec<Option<Array1<f64>>>,
    pub pixel_counts: Vec<usize>,
}

impl ClassTokenSet {
    pub fn num_classes(&self) -> usize {
        self.tokens.len()
    }

    pub fn present(&self) -> Vec<usize> {
        (0..self.tokens.len())
            .filter(|&c| self.tokens[c].is_some())
            .collect()
    }
}

/// Accumulates per-class feature sums; finalizing divides by pixel counts.
/// Used directly for single images and to pool a whole batch into one
/// token set.
#[derive(Debug, Clone)]
pub struct TokenAccumulator {
    dim: usize,
    sums: Vec<Array1<f64>>,
    counts: Vec<usize>,
}

impl TokenAccumulator {
    pub fn new(num_classes: usize, dim: usize) -> Self {
        TokenAccumulator {
            dim,
            sums: vec![Array1::zeros(dim); num_classes],
            counts: vec![0; num_classes],
        }
    }

    /// Adds every non-IGNORE pixel of one feature map.
    pub fn add(&mut self, features: &FeatureMap, labels: &Array2<u8>) -> Result<()> {
        let n = self.sums.len();
        if features.spatial() != labels.dim() {
            return Err(Error::ShapeMismatch {
                context: "features vs labels",
                left: vec![features.h, features.w],
                right: vec![labels.dim().0, labels.dim().1],
            });
        }
        if features.channels() != self.dim {
            return Err(Error::ShapeMismatch {
                context: "feature channels vs accumulator dim",
                left: vec![features.channels()],
                right: vec![self.dim],
            });
        }
        let labels_flat = labels.as_slice().expect("standard layout");
        for (row, &label) in features.data.rows().into_iter().zip(labels_flat) {
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
            self.sums[c] += &row;
            self.counts[c] += 1;
        }
        Ok(())
    }

    pub fn finalize(&self) -> ClassTokenSet {
        let tokens = self
            .sums
            .iter()
            .zip(&self.counts)
            .map(|(sum, &cnt)| (cnt > 0).then(|| sum / cnt as f64))
            .collect();
        ClassTokenSet {
            dim: self.dim,
            tokens,
            pixel_counts: self.counts.clone(),
        }
    }
}

/// Mean feature vector per class present in `labels`.
pub fn compute_class_tokens(
    features: &FeatureMap,
    labels: &Array2<u8>,
    num_classes: usize,
) -> Result<ClassTokenSet> {
    let mut acc = TokenAccumulator::new(num_classes, features.channels());
    acc.add(features, labels)?;
    Ok(acc.finalize())
}

/// Symmetric matrix of pairwise token distances. Entries between classes
/// that are not both present carry NaN as the undefined sentinel and are
/// skipped by every reduction; the diagonal is zero for all classes.
#[derive(Debug, Clone)]
pub struct DistanceGraph {
    pub edges: Array2<f64>,
    pub present: Vec<bool>,
}

impl DistanceGraph {
    pub fn num_classes(&self) -> usize {
        self.present.len()
    }

    /// Unordered pairs `(i, j)` with `i < j` and both classes present.
    pub fn defined_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.present.len();
        let mut out = Vec::new();
        for i in 0..n {
            if !self.present[i] {
                continue;
            }
            for j in (i + 1)..n {
                if self.present[j] {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Fewer than two classes present: no defined edges.
    pub fn is_degenerate(&self) -> bool {
        self.present.iter().filter(|&&p| p).count() < 2
    }
}

/// Pairwise Euclidean distances between the present tokens.
pub fn compute_distance_graph(tokens: &ClassTokenSet, num_classes: usize) -> Result<DistanceGraph> {
    if tokens.num_classes() != num_classes {
        return Err(Error::ShapeMismatch {
            context: "token set class count",
            left: vec![tokens.num_classes()],
            right: vec![num_classes],
        });
    }
    for t in tokens.tokens.iter().flatten() {
        if t.len() != tokens.dim {
            return Err(Error::ShapeMismatch {
                context: "mixed token dimensions",
                left: vec![t.len()],
                right: vec![tokens.dim],
            });
        }
    }
    let mut edges = Array2::from_elem((num_classes, num_classes), f64::NAN);
    let present: Vec<bool> = tokens.tokens.iter().map(|t| t.is_some()).collect();
    for i in 0..num_classes {
        edges[[i, i]] = 0.0;
        for j in (i + 1)..num_classes {
            if let (Some(a), Some(b)) = (&tokens.tokens[i], &tokens.tokens[j]) {
                let d = (a - b).mapv(|v| v * v).sum().sqrt();
                edges[[i, j]] = d;
                edges[[j, i]] = d;
            }
        }
    }
    Ok(DistanceGraph { edges, present })
}

/// Value of the inter-class distance loss plus a degeneracy marker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdLoss {
    pub value: f64,
    /// True when fewer than two classes were present, so no pair
    /// contributed and the value is an empty sum.
    pub degenerate: bool,
}

fn check_compatible(teacher: &DistanceGraph, student: &DistanceGraph) -> Result<()> {
    if teacher.num_classes() != student.num_classes() {
        return Err(Error::ShapeMismatch {
            context: "distance graph class count",
            left: vec![teacher.num_classes()],
            right: vec![student.num_classes()],
        });
    }
    if teacher.present != student.present {
        return Err(Error::PresenceMismatch(format!(
            "teacher {:?} vs student {:?}",
            teacher.present, student.present
        )));
    }
    Ok(())
}

/// `1/2 * sum over ordered pairs (i != j, both present) of
/// (teacher edge - student edge)^2`. Both graphs must come from the same
/// label map, so presence always matches.
pub fn interclass_distance_loss(
    teacher: &DistanceGraph,
    student: &DistanceGraph,
) -> Result<IdLoss> {
    check_compatible(teacher, student)?;
    if teacher.is_degenerate() {
        return Ok(IdLoss {
            value: 0.0,
            degenerate: true,
        });
    }
    let mut value = 0.0;
    for (i, j) in teacher.defined_pairs() {
        let diff = teacher.edges[[i, j]] - student.edges[[i, j]];
        // the ordered double sum visits (i,j) and (j,i)
        value += diff * diff;
    }
    Ok(IdLoss {
        value,
        degenerate: false,
    })
}

/// Gradient of the loss with respect to each student token.
///
/// `d/dv_i = sum_j 2 (e^S_ij - e^T_ij) (v_i - v_j) / e^S_ij`; pairs with
/// coincident student tokens contribute zero (subgradient choice).
pub fn token_gradients(
    teacher: &DistanceGraph,
    student_tokens: &ClassTokenSet,
    student_graph: &DistanceGraph,
) -> Result<Vec<Option<Array1<f64>>>> {
    check_compatible(teacher, student_graph)?;
    let mut grads: Vec<Option<Array1<f64>>> = student_tokens
        .tokens
        .iter()
        .map(|t| t.as_ref().map(|v| Array1::zeros(v.len())))
        .collect();
    for (i, j) in student_graph.defined_pairs() {
        let es = student_graph.edges[[i, j]];
        if es == 0.0 {
            continue;
        }
        let et = teacher.edges[[i, j]];
        let coef = 2.0 * (es - et) / es;
        let vi = student_tokens.tokens[i].as_ref().expect("present");
        let vj = student_tokens.tokens[j].as_ref().expect("present");
        let delta = vi - vj;
        if let Some(g) = grads[i].as_mut() {
            g.scaled_add(coef, &delta);
        }
        if let Some(g) = grads[j].as_mut() {
            g.scaled_add(-coef, &delta);
        }
    }
    Ok(grads)
}

/// Spreads token gradients back to the pixels that formed each token:
/// a pixel labelled `c` receives `dtokens[c] / pixel_counts[c]`. The counts
/// must be the ones the tokens were finalized with (pooled counts when the
/// tokens pooled a batch).
pub fn scatter_token_gradients(
    dtokens: &[Option<Array1<f64>>],
    pixel_counts: &[usize],
    labels: &Array2<u8>,
    dfeatures: &mut FeatureMap,
) {
    let labels_flat = labels.as_slice().expect("standard layout");
    for (mut row, &label) in dfeatures
        .data
        .rows_mut()
        .into_iter()
        .zip(labels_flat.iter())
    {
        if label == IGNORE_LABEL {
            continue;
        }
        let c = label as usize;
        if let Some(g) = dtokens.get(c).and_then(|g| g.as_ref()) {
            row.scaled_add(1.0 / pixel_counts[c] as f64, g);
        }
    }
}

/// Single-image convenience: student tokens/graph from `(features, labels)`,
/// loss against the teacher graph, and the feature gradient.
pub fn interclass_loss_with_feature_grad(
    teacher: &DistanceGraph,
    features: &FeatureMap,
    labels: &Array2<u8>,
    num_classes: usize,
) -> Result<(IdLoss, FeatureMap)> {
    let tokens = compute_class_tokens(features, labels, num_classes)?;
    let graph = compute_distance_graph(&tokens, num_classes)?;
    let loss = interclass_distance_loss(teacher, &graph)?;
    let mut dfeatures = FeatureMap::zeros(features.channels(), features.h, features.w);
    if !loss.degenerate {
        let dtokens = token_gradients(teacher, &tokens, &graph)?;
        scatter_token_gradients(&dtokens, &tokens.pixel_counts, labels, &mut dfeatures);
    }
    Ok((loss, dfeatures))
}
