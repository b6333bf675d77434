//! Experiment configuration: one TOML file with `model`, `train`, `data`,
//! `crossval` and `sweep` tables. Unknown keys anywhere are errors.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use irnet::arch::ModelConfig;
use irnet::data::SyntheticTask;
use irnet::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset manifest; ignored when `synthetic` is set.
    pub manifest: Option<PathBuf>,
    pub synthetic: bool,
    pub task: SyntheticTask,
    /// Size of the synthetic training pool.
    pub samples: usize,
    /// Size of the synthetic test set.
    pub test_samples: usize,
    /// Side of generated images before resizing to the model input.
    pub image_size: usize,
    pub seed: u64,
    /// The training pool is dealt into this many stratified folds and the
    /// first one is held out for validation.
    pub holdout_folds: usize,
    /// Checkpoint to fine-tune from.
    pub base_checkpoint: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            synthetic: false,
            task: SyntheticTask::Opacity,
            samples: 200,
            test_samples: 100,
            image_size: 32,
            seed: 0,
            holdout_folds: 5,
            base_checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossvalConfig {
    pub k: usize,
    pub runs: usize,
}

impl Default for CrossvalConfig {
    fn default() -> Self {
        Self { k: 5, runs: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    /// Empty means the single value `train.trainable_layers` (all layers
    /// when that is unset).
    pub trainable_layers: Vec<usize>,
    /// Score each cell by cross-validation instead of one holdout fit.
    pub crossval: bool,
    /// Run cells on all cores. Results are identical either way.
    pub parallel: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            learning_rates: vec![1e-3, 1e-4, 1e-5],
            batch_sizes: vec![8, 16, 32, 64],
            trainable_layers: Vec::new(),
            crossval: false,
            parallel: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub crossval: CrossvalConfig,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    /// Parses `text`. Keys under `[model]` override the canonical network,
    /// or the desk network when `desk` is set.
    pub fn parse(text: &str, desk: bool) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text)?;
        let base = if desk {
            ModelConfig::desk()
        } else {
            ModelConfig::canonical()
        };
        let mut model = toml::Table::try_from(&base)?;
        match table.remove("model") {
            Some(toml::Value::Table(user)) => model.extend(user),
            Some(_) => anyhow::bail!("`model` must be a table"),
            None => {}
        }
        table.insert("model".into(), toml::Value::Table(model));
        let cfg: Self = toml::Value::Table(table).try_into()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, desk: bool) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
            None => String::new(),
        };
        let cfg = Self::parse(&text, desk).with_context(|| match path {
            Some(p) => format!("invalid config {}", p.display()),
            None => "invalid default config".into(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let d = &self.data;
        anyhow::ensure!(d.holdout_folds >= 2, "data.holdout_folds must be >= 2");
        anyhow::ensure!(self.crossval.k >= 2, "crossval.k must be >= 2");
        anyhow::ensure!(self.crossval.runs >= 1, "crossval.runs must be >= 1");
        let s = &self.sweep;
        anyhow::ensure!(
            !s.learning_rates.is_empty() && !s.batch_sizes.is_empty(),
            "sweep grid is empty: learning_rates and batch_sizes need at least one value"
        );
        for &lr in &s.learning_rates {
            anyhow::ensure!(lr.is_finite() && lr > 0.0, "sweep.learning_rates must be > 0, got {lr}");
        }
        anyhow::ensure!(!s.batch_sizes.contains(&0), "sweep.batch_sizes must be >= 1");
        Ok(())
    }
}
