//! Run configuration: TOML schema, defaults, and manifest handling.
//!
//! A config file is a partial override of the defaults below; a manifest
//! is the same document with every default materialized plus the command
//! that produced it. Any command accepts either through `--config`, which
//! is what makes manifest replay work.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use idd_core::data::DatasetSpec;
use idd_core::losses::LossWeights;
use idd_core::models::{ModelSpec, Role};
use idd_core::position::PosPretrainConfig;
use idd_core::trainer::TrainConfig;

/// Network architecture knobs exposed in the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub channel_widths: Vec<usize>,
    pub feature_dim: usize,
}

impl ArchConfig {
    fn teacher_default() -> Self {
        let spec = ModelSpec::teacher_default(2);
        ArchConfig {
            channel_widths: spec.channel_widths,
            feature_dim: spec.feature_dim,
        }
    }

    fn student_default() -> Self {
        let spec = ModelSpec::student_default(2);
        ArchConfig {
            channel_widths: spec.channel_widths,
            feature_dim: spec.feature_dim,
        }
    }

    pub fn to_model_spec(&self, role: Role, num_classes: usize) -> ModelSpec {
        ModelSpec {
            role,
            channel_widths: self.channel_widths.clone(),
            num_classes,
            feature_dim: self.feature_dim,
        }
    }
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig::student_default()
    }
}

/// Optimization scalars; combined with `[loss]` into the core TrainConfig.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub total_iters: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub pos_head_hidden: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainParams {
            total_iters: t.total_iters,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            lr_power: t.lr_power,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            seed: t.seed,
            eval_every: t.eval_every,
            pos_head_hidden: t.pos_head_hidden,
        }
    }
}

/// Position-head pretraining knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosheadParams {
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for PosheadParams {
    fn default() -> Self {
        let p = PosPretrainConfig::default();
        PosheadParams {
            iters: p.iters,
            batch_size: p.batch_size,
            lr: p.lr,
            momentum: p.momentum,
            hidden: p.hidden,
            seed: p.seed,
        }
    }
}

impl PosheadParams {
    pub fn to_core(&self) -> PosPretrainConfig {
        PosPretrainConfig {
            iters: self.iters,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            hidden: self.hidden,
            seed: self.seed,
        }
    }
}

/// Input artifact locations consumed by the training/eval commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub dataset_dir: PathBuf,
    pub teacher_checkpoint: PathBuf,
    pub teacher_poshead: PathBuf,
    pub eval_checkpoint: PathBuf,
}

impl Default for Inputs {
    fn default() -> Self {
        Inputs {
            dataset_dir: "runs/data".into(),
            teacher_checkpoint: "runs/teacher/teacher.ckpt".into(),
            teacher_poshead: "runs/poshead/teacher_poshead.ckpt".into(),
            eval_checkpoint: "runs/distill/student.ckpt".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalParams {
    /// Which split to evaluate: "val", "train", or "both".
    pub split: String,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams { split: "val".into() }
    }
}

/// The complete, fully-defaultable run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub artifact_version: String,
    /// Set in manifests: the command that produced the run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    /// Set in manifests when a preset drove the loss toggles.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub deterministic: bool,
    /// Number of seeds for the ablation runner.
    pub seeds: usize,
    pub dataset: DatasetSpec,
    pub teacher: ArchConfig,
    pub student: ArchConfig,
    pub train: TrainParams,
    pub loss: LossWeights,
    pub poshead: PosheadParams,
    pub inputs: Inputs,
    pub eval: EvalParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            command: None,
            preset: None,
            deterministic: true,
            seeds: 3,
            dataset: DatasetSpec::default(),
            teacher: ArchConfig::teacher_default(),
            student: ArchConfig::student_default(),
            train: TrainParams::default(),
            loss: LossWeights::default(),
            poshead: PosheadParams::default(),
            inputs: Inputs::default(),
            eval: EvalParams::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            total_iters: self.train.total_iters,
            batch_size: self.train.batch_size,
            base_lr: self.train.base_lr,
            lr_power: self.train.lr_power,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            seed: self.train.seed,
            weights: self.loss,
            eval_every: self.train.eval_every,
            pos_head_hidden: self.train.pos_head_hidden,
        }
    }

    /// Applies a named preset to the loss toggles.
    pub fn apply_preset(&mut self, preset: &str) -> Result<()> {
        let Some(w) = LossWeights::preset(preset) else {
            bail!(
                "unknown preset '{preset}'; valid presets: {}",
                LossWeights::preset_names().join(", ")
            );
        };
        self.loss.enable_skd = w.enable_skd;
        self.loss.enable_cw = w.enable_cw;
        self.loss.enable_id = w.enable_id;
        self.loss.enable_pi = w.enable_pi;
        self.preset = Some(preset.to_string());
        Ok(())
    }

    /// Serializes the fully-resolved manifest.
    pub fn to_manifest_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self).context("encoding manifest")?)
    }
}

/// Writes the manifest before any real work happens in `out_dir`.
pub fn write_manifest(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output dir {}", out_dir.display()))?;
    let path = out_dir.join("manifest.toml");
    std::fs::write(&path, cfg.to_manifest_toml()?)
        .with_context(|| format!("writing manifest {}", path.display()))?;
    Ok(path)
}

/// Refuses to reuse an output directory that already holds a manifest,
/// unless forced.
pub fn guard_output_dir(out_dir: &Path, force: bool) -> Result<()> {
    let manifest = out_dir.join("manifest.toml");
    if manifest.exists() && !force {
        bail!(
            "output directory {} already contains a run (manifest.toml present); pass --force to overwrite",
            out_dir.display()
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_manifest_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_sections_merge_over_defaults() {
        let cfg: RunConfig = toml::from_str(
            r#"
            [dataset]
            train_count = 64

            [train]
            total_iters = 10
            "#,
        )
        .unwrap();
        assert_eq!(cfg.dataset.train_count, 64);
        assert_eq!(cfg.dataset.num_classes, 6); // default retained
        assert_eq!(cfg.train.total_iters, 10);
        assert_eq!(cfg.train.base_lr, 0.01);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("[train]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn presets_flip_only_toggles() {
        let mut cfg = RunConfig::default();
        cfg.loss.lambda1 = 9.5;
        cfg.apply_preset("baseline").unwrap();
        assert!(!cfg.loss.enable_skd && !cfg.loss.enable_pi);
        assert_eq!(cfg.loss.lambda1, 9.5);
        assert_eq!(cfg.preset.as_deref(), Some("baseline"));
        assert!(cfg.apply_preset("bogus").is_err());
    }
}
