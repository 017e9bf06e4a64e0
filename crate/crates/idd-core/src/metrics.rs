//! Segmentation accuracy metrics and feature-space diagnostics.

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{Sample, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::interclass::{compute_class_tokens, compute_distance_graph};
use crate::models::{image_to_map, SegNet};
use crate::nn::FeatureMap;

/// Pixel confusion counts; rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Array2<u64>,
    pub ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            counts: Array2::zeros((num_classes, num_classes)),
            ignored: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.counts += &other.counts;
        self.ignored += other.ignored;
    }

    pub fn total_pixels(&self) -> u64 {
        self.counts.sum() + self.ignored
    }
}

/// Adds one prediction/label pair to the matrix. IGNORE labels count into
/// `ignored`; out-of-range predictions are an error.
pub fn accumulate_confusion(
    cm: &mut ConfusionMatrix,
    predictions: &Array2<u8>,
    labels: &Array2<u8>,
) -> Result<()> {
    if predictions.dim() != labels.dim() {
        return Err(Error::ShapeMismatch {
            context: "predictions vs labels",
            left: vec![predictions.dim().0, predictions.dim().1],
            right: vec![labels.dim().0, labels.dim().1],
        });
    }
    let n = cm.num_classes();
    for (&p, &g) in predictions.iter().zip(labels.iter()) {
        if g == IGNORE_LABEL {
            cm.ignored += 1;
            continue;
        }
        if g as usize >= n {
            return Err(Error::InvalidLabel {
                label: g,
                num_classes: n,
            });
        }
        if p as usize >= n {
            return Err(Error::PredictionOutOfRange {
                label: p,
                num_classes: n,
            });
        }
        cm.counts[[g as usize, p as usize]] += 1;
    }
    Ok(())
}

/// Per-class IoU (None where ground truth and predictions are both empty)
/// and their mean over the defined classes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IouReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn compute_iou(cm: &ConfusionMatrix) -> IouReport {
    let n = cm.num_classes();
    let mut per_class = Vec::with_capacity(n);
    let mut sum = 0.0;
    let mut defined = 0usize;
    for c in 0..n {
        let tp = cm.counts[[c, c]];
        let row: u64 = (0..n).map(|j| cm.counts[[c, j]]).sum();
        let col: u64 = (0..n).map(|i| cm.counts[[i, c]]).sum();
        let denom = row + col - tp;
        if denom == 0 {
            per_class.push(None);
        } else {
            let iou = tp as f64 / denom as f64;
            per_class.push(Some(iou));
            sum += iou;
            defined += 1;
        }
    }
    IouReport {
        per_class_iou: per_class,
        miou: if defined > 0 { sum / defined as f64 } else { 0.0 },
    }
}

/// The full evaluation document with stable keys.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub params: usize,
    pub mean_interclass_distance: Option<f64>,
}

/// Channel argmax per pixel; ties resolve to the lowest class index.
pub fn predict_labels(logits: &FeatureMap) -> Array2<u8> {
    let (h, w) = logits.spatial();
    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let row = logits.data.row(y * w + x);
            let mut best = 0usize;
            let mut best_v = row[0];
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            out[[y, x]] = best as u8;
        }
    }
    out
}

/// Runs the model over a sample set and reduces the confusion matrix.
/// Per-sample matrices are computed in parallel and merged in index order.
pub fn evaluate_model(model: &SegNet, samples: &[Sample], num_classes: usize) -> Result<IouReport> {
    let partials: Vec<Result<ConfusionMatrix>> = samples
        .par_iter()
        .map(|s| {
            let out = model.forward(&image_to_map(&s.image))?;
            let pred = predict_labels(&out.logits);
            let mut cm = ConfusionMatrix::new(num_classes);
            accumulate_confusion(&mut cm, &pred, &s.labels)?;
            Ok(cm)
        })
        .collect();
    let mut cm = ConfusionMatrix::new(num_classes);
    for p in partials {
        cm.merge(&p?);
    }
    Ok(compute_iou(&cm))
}

/// Mean defined edge length over a stream of (features, labels) pairs,
/// after rescaling each image's token set to unit mean norm so the
/// statistic is invariant to global feature scale. `None` when no image
/// has two present classes.
pub fn mean_interclass_distance_of_maps<'a>(
    pairs: impl Iterator<Item = (&'a FeatureMap, &'a Array2<u8>)>,
    num_classes: usize,
) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (features, labels) in pairs {
        let mut tokens = compute_class_tokens(features, labels, num_classes)?;
        let present = tokens.present();
        if present.len() < 2 {
            continue;
        }
        let mean_norm = present
            .iter()
            .map(|&c| {
                let t = tokens.tokens[c].as_ref().expect("present");
                t.dot(t).sqrt()
            })
            .sum::<f64>()
            / present.len() as f64;
        if mean_norm > 0.0 {
            for t in tokens.tokens.iter_mut().flatten() {
                *t /= mean_norm;
            }
        }
        let graph = compute_distance_graph(&tokens, num_classes)?;
        for (i, j) in graph.defined_pairs() {
            sum += graph.edges[[i, j]];
            count += 1;
        }
    }
    Ok((count > 0).then(|| sum / count as f64))
}

/// Feature-space diagnostic over a dataset; requires a frozen model.
pub fn mean_interclass_distance(
    model: &SegNet,
    samples: &[Sample],
    num_classes: usize,
) -> Result<Option<f64>> {
    if !model.frozen {
        return Err(Error::Config(
            "inter-class distance diagnostic expects a frozen model".into(),
        ));
    }
    let feats: Vec<(FeatureMap, &Array2<u8>)> = samples
        .par_iter()
        .map(|s| {
            let out = model.forward(&image_to_map(&s.image))?;
            Ok((out.features, &s.labels))
        })
        .collect::<Result<_>>()?;
    mean_interclass_distance_of_maps(feats.iter().map(|(f, l)| (f, *l)), num_classes)
}
