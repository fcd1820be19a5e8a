//! `pgeigen`: data generation, training, evaluation, sweeps, benchmarks and
//! diagnostics for physics-guided eigenpair networks.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pgeigen::losses::Mode;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Runtime(_) => "runtime",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    Mode::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Mode::ALL.iter().map(|m| m.name()).collect();
        format!("unknown mode `{s}` (expected one of {})", names.join(", "))
    })
}

#[derive(Debug, Parser)]
#[command(name = "pgeigen", version, about = "Physics-guided eigenpair networks")]
pub struct Cli {
    /// TOML experiment configuration; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Training seed (replaces `seeds`). For gen-data, the dataset seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for sweeps and landscape grids.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Training mode (replaces `mode`, and `sweep.modes` for sweeps).
    #[arg(long, global = true, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate and label a dataset.
    GenData,
    /// Train one model.
    Train {
        /// Dataset file; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Score the exact labels instead of a network.
        #[arg(long, conflicts_with = "checkpoint")]
        oracle: bool,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Train every mode, size and seed combination and aggregate.
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Time the network against the dense eigensolver on the test split.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        repetitions: Option<usize>,
    },
    /// Gradient projections and a loss-landscape slice for a training run.
    Diag {
        /// Directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Reference parameters; defaults to the run's final checkpoint.
        #[arg(long)]
        theta_star: Option<PathBuf>,
        #[arg(long)]
        grid_size: Option<usize>,
        #[arg(long)]
        range: Option<f64>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            report(&CliError::Usage(e.to_string().trim_end().to_string()));
            return ExitCode::from(1);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::from(e.exit_code())
        }
    }
}

/// One JSON object per line on stderr.
fn report(e: &CliError) {
    let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
    eprintln!("{line}");
}
