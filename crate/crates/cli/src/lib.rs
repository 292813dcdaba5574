//! `tealeaf`: every pipeline stage behind one binary.
//!
//! Each subcommand reads a [`RunConfig`] (TOML, `--config`), lets individual
//! flags override it, and writes its artifacts under `output_dir`. Existing
//! outputs are never replaced unless `--overwrite` is given.
//!
//! Exit codes: 0 on success, 1 for user errors (bad config, missing inputs,
//! refused overwrite), 2 for internal failures.

pub mod commands;
pub mod config;
pub mod plot;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use tealeaf_core::models::ArchitectureId;
use tealeaf_core::Error as CoreError;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("cannot parse config {0}")]
    ConfigParse(String),
    #[error("{0}")]
    Input(String),
    #[error("{0} already exists; pass --overwrite to replace it")]
    OutputExists(PathBuf),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Serve(#[from] tealeaf_service::ServeError),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_)
            | CliError::Config { .. }
            | CliError::ConfigParse(_)
            | CliError::Input(_)
            | CliError::OutputExists(_) => 1,
            CliError::Core(e) => core_exit_code(e),
            CliError::Serve(tealeaf_service::ServeError::Model(e)) => core_exit_code(e),
            CliError::Serve(tealeaf_service::ServeError::PortInUse(_)) => 1,
            CliError::Serve(_) | CliError::Internal(_) => 2,
        }
    }
}

fn core_exit_code(e: &CoreError) -> u8 {
    match e {
        CoreError::NonFiniteLoss { .. }
        | CoreError::GradientUnavailable(_)
        | CoreError::ShapeMismatch(_)
        | CoreError::LengthMismatch(..)
        | CoreError::EmptyMatrix
        | CoreError::Json(_) => 2,
        CoreError::Io { source, .. } => match source.kind() {
            std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied => 1,
            _ => 2,
        },
        _ => 1,
    }
}

#[derive(Debug, Parser)]
#[command(name = "tealeaf", version, about = "Tea-leaf disease classification pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct CommonArgs {
    /// Run configuration (TOML). Without it the preset for `--arch` is used.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub dataset_root: Option<PathBuf>,
    #[arg(long, global = true)]
    pub arch: Option<ArchitectureId>,
    /// Replace existing outputs instead of refusing.
    #[arg(long, global = true)]
    pub overwrite: bool,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Args, Clone, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan the dataset, split it and write the manifest.
    Ingest,
    /// Train a classifier; writes model.ckpt and history.jsonl.
    Train(TrainArgs),
    /// Train with FGSM examples mixed into every batch.
    AdvTrain {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Retrain from scratch once per epsilon and tabulate validation results.
    Sweep {
        #[command(flatten)]
        train: TrainArgs,
        /// Comma-separated list replacing `adversarial.sweep_epsilons`.
        #[arg(long, value_delimiter = ',')]
        epsilons: Option<Vec<f64>>,
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Confusion matrix and per-class metrics on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Grad-CAM and occlusion maps for individual images.
    Explain {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, required = true)]
        image: Vec<PathBuf>,
        #[arg(long, value_enum)]
        method: Option<config::ExplainMethod>,
        /// Class name or index; defaults to the predicted class.
        #[arg(long)]
        target: Option<String>,
    },
    /// Serve predictions over HTTP.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
    },
    /// Render history, sweep and evaluation files as SVG charts.
    Plot {
        /// Files to plot; defaults to every known artifact in output_dir.
        #[arg(long)]
        input: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

/// Parses `argv` and runs the subcommand; returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                _ => {
                    let msg = e.to_string();
                    let line = msg.lines().next().unwrap_or("invalid arguments");
                    eprintln!("tealeaf: {}", line.trim_start_matches("error: "));
                    1
                }
            };
        }
    };
    let level = if cli.common.quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_secs()
        .try_init();
    match commands::run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("tealeaf: error: {e}");
            e.exit_code()
        }
    }
}
