//! `metapix` command-line entry point.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "metapix", version, about = "Meta-learned pixel weighting for two-domain segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON configuration file (defaults are used for missing fields).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set schedule.N2=600`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct OutputArgs {
    /// Write into this directory instead of a new timestamped one.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic two-domain dataset.
    GenerateData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (default: paths.data_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Joint pretraining only (N1 steps).
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutputArgs,
        /// Stop after this many completed steps and save a checkpoint.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Full schedule: pretraining then generations of meta and weighted
    /// steps. `mode=joint` or `mode=target_only` run the baselines.
    Metapix {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutputArgs,
        /// Start from this checkpoint (its step count, schedule and
        /// networks); the configured mode replaces the stored one.
        #[arg(long)]
        init_from: Option<PathBuf>,
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Continue a run from `checkpoints/latest.ckpt` in its directory.
    Resume {
        /// The run directory to continue.
        run_dir: PathBuf,
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Target-validation mIoU of a checkpoint's segmentation network.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutputArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write weight maps of source images as 8-bit PNGs.
    ExportWeights {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutputArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of source images, taken from index 0.
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Finite-difference certification of every primitive and of the
    /// meta-gradient.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutputArgs,
    },
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    use commands::*;
    match cli.command {
        Command::GenerateData { cfg, out } => generate_data(&cfg, out).map(|_| true),
        Command::Pretrain { cfg, out, stop_at } => train(&cfg, &out, TrainKind::Pretrain, None, stop_at).map(|_| true),
        Command::Metapix {
            cfg,
            out,
            init_from,
            stop_at,
        } => train(&cfg, &out, TrainKind::Full, init_from, stop_at).map(|_| true),
        Command::Resume { run_dir, stop_at } => resume(&run_dir, stop_at).map(|_| true),
        Command::Evaluate { cfg, out, checkpoint } => evaluate(&cfg, &out, &checkpoint).map(|_| true),
        Command::ExportWeights {
            cfg,
            out,
            checkpoint,
            count,
        } => export_weights(&cfg, &out, &checkpoint, count).map(|_| true),
        Command::Gradcheck { cfg, out } => gradcheck(&cfg, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
