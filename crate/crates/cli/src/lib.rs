//! The `gflowmask` pipeline: synthetic data generation, training,
//! evaluation (optionally under noise), ID-vs-OOD comparison and Grad-CAM
//! export. Every subcommand is a pure function of its config and inputs.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use gflowmask_core::data::DataError;
use gflowmask_core::gflowout::GflowError;
use gflowmask_core::metrics::MetricsError;
use gflowmask_core::nn::NnError;
use gflowmask_core::saliency::SaliencyError;
use thiserror::Error;

pub use commands::{
    cmd_eval, cmd_gen_data, cmd_ood, cmd_saliency, cmd_train, eval_threads, load_network, predict, EvalArgs, OodArgs,
    OodOutput, SaliencyArgs, TrainOutcome, LOG_FILE, THREADS_ENV,
};
pub use config::{EvalConfig, RunConfig};

/// Exit status: 2 bad config, 3 divergence, 4 snapshot mismatch, 1 other.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("bad config: {0}")]
    Config(String),
    #[error("numerical divergence: {0}")]
    Diverged(String),
    #[error("snapshot mismatch: {0}")]
    Snapshot(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Snapshot(_) => 4,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<GflowError> for CliError {
    fn from(e: GflowError) -> Self {
        match e {
            GflowError::Diverged(m) | GflowError::Nn(NnError::NonFinite(m)) => CliError::Diverged(m),
            GflowError::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) | DataError::Noise(_) | DataError::TooSmall { .. } => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<SaliencyError> for CliError {
    fn from(e: SaliencyError) -> Self {
        match e {
            SaliencyError::Gflow(g) => g.into(),
            SaliencyError::Nn(NnError::NonFinite(m)) => CliError::Diverged(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "gflowmask", version, about = "GFlowNet-learned dropout masks for small image classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train/test/ood datasets.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a model and write the snapshot and per-epoch log.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a snapshot and write a metrics report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        args: EvalArgs,
    },
    /// Compare entropy and calibration between ID and OOD data.
    Ood {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        args: OodArgs,
    },
    /// Write Grad-CAM heatmaps and overlays for extreme-entropy samples.
    Saliency {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        args: SaliencyArgs,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config } => {
            cmd_gen_data(&RunConfig::load(&config)?)?;
        }
        Command::Train { config } => {
            let o = cmd_train(&RunConfig::load(&config)?)?;
            eprintln!("final test accuracy {:.2}%", 100.0 * o.final_test_accuracy.unwrap_or(f64::NAN));
        }
        Command::Eval { config, args } => {
            let r = cmd_eval(&RunConfig::load(&config)?, &args)?;
            eprintln!("accuracy {:.2}%  ece {:.4}  mean entropy {:.4}", r.accuracy, r.ece, r.entropy.mean);
        }
        Command::Ood { config, args } => {
            let o = cmd_ood(&RunConfig::load(&config)?, &args)?;
            eprintln!(
                "mean entropy id {:.4} ood {:.4}",
                o.comparison.mean_entropy_id, o.comparison.mean_entropy_ood
            );
        }
        Command::Saliency { config, args } => {
            let files = cmd_saliency(&RunConfig::load(&config)?, &args)?;
            eprintln!("wrote {} files", files.len());
        }
    }
    Ok(())
}
