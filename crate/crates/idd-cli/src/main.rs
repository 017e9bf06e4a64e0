use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use idd_cli::CommonArgs;

/// Desk-scale inter-class distance distillation for semantic segmentation.
#[derive(Parser)]
#[command(name = "idd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Flags {
    /// Config file (or a manifest from a previous run).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (default: runs/<command>).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override the seed that drives this command.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of seeds for the ablation runner.
    #[arg(long)]
    seeds: Option<usize>,
    /// Loss-term preset: baseline, skd, skd-cw, skd-cw-id, skd-cw-pi, full-idd.
    #[arg(long)]
    preset: Option<String>,
    /// Record deterministic mode in the manifest (execution is always
    /// deterministic on CPU).
    #[arg(long)]
    deterministic: bool,
    /// Overwrite an existing output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset splits.
    GenData(Flags),
    /// Train the teacher network on the target loss.
    TrainTeacher(Flags),
    /// Pretrain the teacher's position head on frozen features.
    PretrainPoshead(Flags),
    /// Distill a student against the stored teacher artifacts.
    Distill(Flags),
    /// Evaluate a checkpoint and write the metrics report.
    Evaluate(Flags),
    /// Run the six-configuration loss ablation.
    Ablate(Flags),
}

impl Command {
    fn split(self) -> (&'static str, Flags) {
        match self {
            Command::GenData(f) => ("gen-data", f),
            Command::TrainTeacher(f) => ("train-teacher", f),
            Command::PretrainPoshead(f) => ("pretrain-poshead", f),
            Command::Distill(f) => ("distill", f),
            Command::Evaluate(f) => ("evaluate", f),
            Command::Ablate(f) => ("ablate", f),
        }
    }
}

fn main() -> Result<()> {
    // IDD_NUM_WORKERS caps batch/eval parallelism (default: all cores).
    if let Ok(v) = std::env::var("IDD_NUM_WORKERS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
    let cli = Cli::parse();
    let (name, flags) = cli.command.split();
    let args = CommonArgs {
        config: flags.config,
        out: flags.out,
        seed: flags.seed,
        seeds: flags.seeds,
        preset: flags.preset,
        deterministic: flags.deterministic,
        force: flags.force,
    };
    idd_cli::run_command(name, &args)
}
