//! The `irnet` command line: training, fine-tuning, cross-validation,
//! hyperparameter sweeps, evaluation and plot-ready exports.
//!
//! Every command writes its outputs into `--out` and prints a short summary.
//! Repeating a command with the same inputs rewrites byte-identical files.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod sweep;
pub mod tables;

pub use config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(name = "irnet", version, about = "Inception-ResNet image classifier experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every experiment command.
#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest; overrides `data.manifest`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Seed for model initialization and training; overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use generated images instead of a manifest.
    #[arg(long)]
    pub synthetic: bool,
    /// Start from the desk-scale model instead of the canonical one.
    #[arg(long)]
    pub desk: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on the holdout split of the training pool.
    Train {
        #[command(flatten)]
        common: Common,
        /// Fine-tune from this checkpoint instead of training from scratch.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Train from a base checkpoint with a fresh classifier head.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
    },
    /// Repeated stratified k-fold cross-validation.
    Crossval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Grid over learning rate, batch size and trainable layers.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Run grid cells on all cores.
        #[arg(long)]
        parallel: bool,
    },
    /// Metrics and per-sample scores of a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `train` or `test`.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Confusion matrix and metrics of a checkpoint.
    Confusion {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Collect training curves from run-record files into one table.
    ExportCurves {
        /// Record files (`.jsonl`) or directories containing them.
        #[arg(long, required = true, num_args = 1..)]
        records: Vec<PathBuf>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Checkpoint utilities.
    Weights {
        #[command(subcommand)]
        command: WeightsCommand,
    },
    /// Print the layer-by-layer shape table of the configured model.
    Shapes {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference gradient checks of every primitive and the model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Random instances per primitive.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

#[derive(Subcommand, Debug)]
pub enum WeightsCommand {
    /// List metadata and tensors.
    Inspect { path: PathBuf },
    /// Replace the classifier head with a freshly initialized one.
    ConvertHead {
        path: PathBuf,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Runs `cli` and returns the summary to print.
pub fn run(cli: Cli) -> Result<String> {
    use commands::*;
    match cli.command {
        Command::Train { common, base } => train(&common, base.as_deref()).map(|o| o.summary),
        Command::Finetune { common, base } => train(&common, Some(&base)).map(|o| o.summary),
        Command::Crossval { common, k, runs } => crossval(&common, k, runs).map(|o| o.summary),
        Command::Sweep { common, parallel } => sweep(&common, parallel).map(|o| o.summary),
        Command::Evaluate {
            common,
            checkpoint,
            split,
        } => evaluate(&common, &checkpoint, split.parse().map_err(anyhow::Error::msg)?).map(|o| o.summary),
        Command::Confusion {
            common,
            checkpoint,
            split,
        } => confusion(&common, &checkpoint, split.parse().map_err(anyhow::Error::msg)?).map(|o| o.summary),
        Command::ExportCurves { records, out } => export_curves(&records, &out),
        Command::Weights { command } => match command {
            WeightsCommand::Inspect { path } => inspect(&path),
            WeightsCommand::ConvertHead {
                path,
                classes,
                out,
                seed,
            } => convert_head(&path, classes, &out, seed),
        },
        Command::Shapes { common } => shapes(&common),
        Command::Gradcheck { common, instances } => gradcheck(&common, instances),
    }
}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
struct BookCli;
