//! `igbo`: experiment harness for interpretability-guided training.
//!
//! Exit status: 0 on success, 1 when a library contract or file check fails,
//! 2 on a usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{DataKind, VarianceChoice};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failure(String),
}

impl From<igbo::Error> for CliError {
    fn from(e: igbo::Error) -> Self {
        CliError::Failure(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "igbo", version, about = "Interpretability-guided bi-objective training harness")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice; required by commands that sample.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BaselineChoice {
    Zero,
    FeatureMean,
}

/// Integration-path options shared by commands that compute attributions.
#[derive(Debug, Args)]
pub struct PathArgs {
    /// Oracle checkpoint; linear paths are used without one.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    /// Anchors per oracle path.
    #[arg(long = "K")]
    pub k: Option<usize>,
    /// Points per integration path.
    #[arg(long = "M")]
    pub m: Option<usize>,
    /// Attribution baseline.
    #[arg(long, value_enum, default_value = "zero")]
    pub baseline: BaselineChoice,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset as `data.csv`.
    GenData {
        #[arg(long, value_enum)]
        kind: Option<DataKind>,
        #[arg(long)]
        series: Option<usize>,
        #[arg(long)]
        len: Option<usize>,
        /// Comma-separated generator coefficients, one per feature.
        #[arg(long, value_delimiter = ',')]
        coefficients: Option<Vec<f64>>,
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long)]
        lag: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        /// `i,j,rho`: redraw feature j correlated with feature i.
        #[arg(long)]
        correlation: Option<String>,
    },
    /// Fit the density validity assessor as `assessor.json`.
    FitAssessor {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = igbo::pathoracle::DEFAULT_CALIBRATION)]
        calibration: f64,
        #[arg(long, default_value_t = igbo::pathoracle::DEFAULT_FLOOR)]
        floor: f64,
    },
    /// Train the path oracle; writes `oracle.json` and `oracle_history.csv`.
    TrainOracle {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        assessor: PathBuf,
        #[arg(long = "K")]
        k: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        lambda: Option<String>,
        #[arg(long, value_enum, default_value = "zero")]
        baseline: BaselineChoice,
    },
    /// Orient and size a DAG from a model's satisfaction scores; writes
    /// `dag.json` and `edge_stats.csv`.
    BuildDag {
        #[arg(long)]
        data: PathBuf,
        /// Model whose attributions are scored.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, value_enum)]
        variance: Option<VarianceChoice>,
        /// Number of score batches.
        #[arg(long)]
        batches: Option<usize>,
        #[command(flatten)]
        path: PathArgs,
    },
    /// Fit the model on the task loss alone; writes `model.json` and
    /// `baseline_history.csv`.
    TrainBaseline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Projected bi-objective training; writes `model.json` and `history.csv`.
    TrainIgbo {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dag: PathBuf,
        /// Starting model; a fresh one is initialised from the seed otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// A number, `fixed:V`, `linear:FROM:TO:STEPS` or `dynamic`.
        #[arg(long)]
        lambda: Option<String>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        #[command(flatten)]
        path: PathArgs,
    },
    /// Accuracy, DAG satisfaction and attribution consistency as `report.json`.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dag: Option<PathBuf>,
        /// Unconstrained model for the relative accuracy change.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Number of batches for the satisfaction rate.
        #[arg(long, default_value_t = 1)]
        batches: usize,
        /// Perturbed copies per input for attribution consistency; 0 skips it.
        #[arg(long, default_value_t = 8)]
        perturbations: usize,
        #[arg(long, default_value_t = 32)]
        consistency_samples: usize,
        #[command(flatten)]
        path: PathArgs,
    },
    /// Variance of the projected direction across batch sizes as
    /// `noise_probe.json`.
    NoiseProbe {
        /// Comma-separated batch sizes.
        #[arg(long, value_delimiter = ',')]
        batches: Option<Vec<usize>>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        draws: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Probe the gradients of this model instead of a synthetic pair.
        #[arg(long, requires_all = ["data", "dag"])]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        dag: Option<PathBuf>,
        #[arg(long = "M")]
        m: Option<usize>,
    },
}

fn check_threads() -> CliResult<()> {
    match std::env::var("IGBO_THREADS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => {
                log::debug!("IGBO_THREADS={n}; all kernels run on one thread");
                Ok(())
            }
            _ => Err(CliError::Usage(format!("IGBO_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = check_threads().and_then(|_| commands::run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Failure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
    }
}
