//! Command-line pipeline: config, run manifest, stages and figures.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod plot;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::das::DasError;
use crate::eval::EvalError;
use crate::grammar::GrammarError;
use crate::model::ModelError;
use crate::stats::StatsError;

pub use config::RunConfig;
pub use manifest::{RunManifest, Stage};
pub use pipeline::{run_stage, StageOutcome};

/// Two classes, mapped to exit codes 1 and 2.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Contract(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Contract(_) => 1,
            Self::Io(_) => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<GrammarError> for CliError {
    fn from(e: GrammarError) -> Self {
        match e {
            GrammarError::Io(e) => e.into(),
            other => Self::Contract(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(e) => e.into(),
            other => Self::Contract(other.to_string()),
        }
    }
}

impl From<DasError> for CliError {
    fn from(e: DasError) -> Self {
        match e {
            DasError::Io(e) => e.into(),
            DasError::Model(e) => e.into(),
            other => Self::Contract(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(e) => e.into(),
            EvalError::Das(e) => e.into(),
            EvalError::Model(e) => e.into(),
            EvalError::Grammar(e) => e.into(),
            other => Self::Contract(other.to_string()),
        }
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        Self::Contract(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "gapscope", version, about = "Filler-gap causal-intervention pipeline on toy transformers")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "gapscope.toml")]
    pub config: PathBuf,
    /// Re-run the stage even if the manifest marks it complete.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads; overrides the config.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Generate the synthetic training corpus and vocabulary.
    GenCorpus,
    /// Train the language model and save scheduled checkpoints.
    TrainLm,
    /// Generate training and held-out minimal pairs for every seed.
    GenPairs,
    /// Train and evaluate DAS directions over the layer × slot grid.
    Sweep,
    /// Batch size × steps grid on one condition at one checkpoint.
    HparamSweep,
    /// Fit the linear model and post-hoc contrasts.
    Stats,
    /// Emit SVG figures and their CSV data.
    Plot,
}

impl Command {
    pub fn stage(&self) -> Stage {
        match self {
            Self::GenCorpus => Stage::GenCorpus,
            Self::TrainLm => Stage::TrainLm,
            Self::GenPairs => Stage::GenPairs,
            Self::Sweep => Stage::Sweep,
            Self::HparamSweep => Stage::HparamSweep,
            Self::Stats => Stage::Stats,
            Self::Plot => Stage::Plot,
        }
    }
}

/// Parses the config, applies flag overrides and runs one stage.
pub fn run(cli: &Cli) -> Result<StageOutcome, CliError> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(CliError::Contract("--workers must be positive".into()));
        }
        cfg.workers = Some(w);
    }
    run_stage(&cfg, cli.command.stage(), cli.force)
}
