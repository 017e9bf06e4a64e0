//! Desk-scale knowledge distillation for semantic segmentation.
//!
//! A frozen convolutional teacher transfers knowledge to a small student
//! through four signals: soft pixel labels, channel-wise spatial
//! distributions, the geometry of inter-class distances in feature space,
//! and predicted absolute-coordinate masks. Everything runs on synthetic
//! shape-segmentation data so a full teacher/student/ablation cycle fits
//! on a single CPU in minutes.
//!
//! Module map:
//! - [`data`] — deterministic synthetic dataset generator + binary container
//! - [`nn`] — minimal f64 conv-net layers with explicit backward passes
//! - [`models`] — teacher/student segmentation networks
//! - [`interclass`] — class tokens, distance graphs, and the distance loss
//! - [`position`] — coordinate masks, position heads, and the position loss
//! - [`losses`] — cross-entropy, KD losses, and the composite objective
//! - [`metrics`] — confusion matrix, IoU, and feature-space diagnostics
//! - [`trainer`] — SGD training, distillation, and the ablation runner
//! - [`checkpoint`] — versioned binary containers for models and heads

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod interclass;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod position;
pub mod rng;
pub mod trainer;

#[cfg(feature = "test-oracles")]
pub mod oracle;

pub use error::{Error, Result};
