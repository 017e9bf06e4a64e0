//! Library surface of the CLI: configuration, commands, and plotting.
//! `main.rs` only parses arguments and dispatches here, so integration
//! tests can drive commands either in-process or through the binary.

pub mod commands;
pub mod config;
pub mod plot;

use std::path::PathBuf;

use anyhow::Result;

use config::RunConfig;

/// Shared command-line arguments.
#[derive(Debug, Clone, Default)]
pub struct CommonArgs {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub seeds: Option<usize>,
    pub preset: Option<String>,
    pub deterministic: bool,
    pub force: bool,
}

/// Loads the config file (or defaults) and applies flag overrides. The
/// `--seed` flag retargets the seed that drives the given command.
pub fn resolve_config(command: &str, args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if args.deterministic {
        cfg.deterministic = true;
    }
    if let Some(seed) = args.seed {
        match command {
            "gen-data" => cfg.dataset.seed = seed,
            "pretrain-poshead" => cfg.poshead.seed = seed,
            _ => cfg.train.seed = seed,
        }
    }
    if let Some(seeds) = args.seeds {
        cfg.seeds = seeds;
    }
    if let Some(preset) = &args.preset {
        cfg.apply_preset(preset)?;
    }
    Ok(cfg)
}

/// Default output directory per command.
pub fn default_out_dir(command: &str) -> PathBuf {
    PathBuf::from("runs").join(command.replace("gen-data", "data"))
}

/// Dispatches one command with resolved arguments.
pub fn run_command(command: &str, args: &CommonArgs) -> Result<()> {
    let cfg = resolve_config(command, args)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| default_out_dir(command));
    match command {
        "gen-data" => commands::cmd_gen_data(cfg, &out, args.force),
        "train-teacher" => commands::cmd_train_teacher(cfg, &out, args.force),
        "pretrain-poshead" => commands::cmd_pretrain_poshead(cfg, &out, args.force),
        "distill" => commands::cmd_distill(cfg, &out, args.force),
        "evaluate" => commands::cmd_evaluate(cfg, &out, args.force),
        "ablate" => commands::cmd_ablate(cfg, &out, args.force),
        other => anyhow::bail!("unknown command {other}"),
    }
}
