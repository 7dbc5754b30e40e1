//! `l2d`: generate synthetic deferral data, train and evaluate
//! learning-to-defer models, and emit budget or expertise sweeps.

mod artifacts;
mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, MethodKind, SweepKind};
use crate::failure::Failure;

#[derive(Parser)]
#[command(name = "l2d", version, about = "Learning-to-defer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset CSVs have one header line.
    #[arg(long)]
    header: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/validation/test CSVs and a manifest.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write its checkpoint and training report.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory written by `generate`; without it the data is built in memory.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        method: Option<MethodKind>,
    },
    /// Evaluate a checkpoint: system metrics, calibration and histograms.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset CSV.
        #[arg(long)]
        data: PathBuf,
        /// Deferral budget in [0, 1].
        #[arg(long)]
        budget: Option<f64>,
        /// Never defer; same as `--budget 0`.
        #[arg(long, conflicts_with = "budget")]
        no_defer: bool,
    },
    /// Sweep deferral budgets for one checkpoint, or expert strength.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: Option<SweepKind>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut config = ExperimentConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.out = Some(out.clone());
    }
    config.header |= common.header;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate { common } => {
            let config = load(&common)?;
            config.validate()?;
            commands::generate(&config)
        }
        Command::Train { common, data, method } => {
            let mut config = load(&common)?;
            if let Some(m) = method {
                config.model.method = m;
            }
            config.validate()?;
            commands::train_cmd(&config, data.as_deref())
        }
        Command::Evaluate { common, checkpoint, data, budget, no_defer } => {
            let mut config = load(&common)?;
            if no_defer {
                config.evaluate.budget = Some(0.0);
            } else if budget.is_some() {
                config.evaluate.budget = budget;
            }
            config.validate()?;
            commands::evaluate_cmd(&config, &checkpoint, &data)
        }
        Command::Sweep { common, kind, checkpoint, data } => {
            let mut config = load(&common)?;
            if let Some(k) = kind {
                config.sweep.kind = k;
            }
            config.validate()?;
            commands::sweep_cmd(&config, checkpoint.as_deref(), data.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
