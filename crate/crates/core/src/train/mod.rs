//! Training loop, fine-tuning and the k-fold cross-validation driver.
//!
//! Every random choice is seeded. Epoch `e` shuffles with
//! `derive(seed, e)` and batch `b` of that epoch draws its dropout mask from
//! `derive(derive(seed, e), b)`. Cross-validation run `r`, fold `f` trains
//! with seed `seed + r·k + f` and run `r` deals its folds with
//! `derive(seed, r)`.

pub mod optim;

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::arch::{Classifier, ModelConfig, ModelGraph};
use crate::data::{batches, collate, stratified_kfold, Sample};
use crate::error::{Error, Result};
use crate::eval::{aggregate, argmax, evaluate, Aggregate, ConfusionMatrix, MetricsReport, Value};
use crate::rng::derive;
use crate::weights::{load_partial, sha256_hex, Checkpoint, LoadPolicy, LoadReport, Skipped};

pub use optim::{adam_step, sgd_momentum_step, AdamState, Optimizer, OptimizerKind, SgdState};

/// Batch size used for validation passes. Evaluation does not depend on it.
pub const EVAL_BATCH: usize = 64;

fn default_lr() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    8
}
fn default_epochs() -> usize {
    30
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Layers counted from the output that may change; `None` trains all.
    #[serde(default)]
    pub trainable_layers: Option<usize>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub seed: u64,
    /// Replaces the model's head dropout rate when set.
    #[serde(default)]
    pub dropout_rate: Option<f64>,
    /// Records wall-clock seconds per epoch. Off by default since timings
    /// make otherwise identical runs differ.
    #[serde(default)]
    pub record_wall_time: bool,
    /// Ends training after the first epoch whose validation accuracy
    /// reaches this value.
    #[serde(default)]
    pub stop_at_val_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            trainable_layers: None,
            epochs: default_epochs(),
            optimizer: OptimizerKind::Adam,
            seed: 0,
            dropout_rate: None,
            record_wall_time: false,
            stop_at_val_acc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if let Some(r) = self.dropout_rate {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("dropout_rate must be in [0, 1), got {r}")));
            }
        }
        if let Some(t) = self.stop_at_val_acc {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Config(format!("stop_at_val_acc must be in (0, 1], got {t}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub val_auc: Value,
    pub wall_seconds: Option<f64>,
}

pub type TrainingCurve = Vec<EpochRecord>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Training stopped at this epoch (1-based) and batch (0-based).
    Failed {
        epoch: usize,
        batch: usize,
        reason: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub fold: usize,
    pub config: TrainConfig,
    pub status: RunStatus,
    pub curve: TrainingCurve,
    /// Final validation report; absent when the run failed.
    pub metrics: Option<MetricsReport>,
    pub confusion: Option<ConfusionMatrix>,
    /// SHA-256 of the final weights serialized without extra metadata.
    pub checkpoint_digest: String,
    pub steps: u64,
    pub train_size: usize,
    pub val_size: usize,
    /// What fine-tuning loaded from and skipped in the base checkpoint.
    pub load_report: Option<LoadReport>,
}

impl RunRecord {
    pub fn failed(&self) -> bool {
        matches!(self.status, RunStatus::Failed { .. })
    }
}

/// SHA-256 of the model's checkpoint bytes.
pub fn model_digest(model: &ModelGraph) -> Result<String> {
    Ok(sha256_hex(&Checkpoint::from_model(model, &[]).to_bytes()?))
}

/// Epoch batches with a trailing single-sample batch folded into the one
/// before it, since batch statistics need two samples.
fn epoch_batches(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut b = batches(n, batch_size, seed, true)?;
    if b.len() > 1 && b.last().is_some_and(|l| l.len() == 1) {
        let last = b.pop().expect("non-empty");
        b.last_mut().expect("non-empty").extend(last);
    }
    Ok(b)
}

/// Trains `model` for `cfg.epochs` epochs, evaluating on `val` after each.
/// With `stop_at_val_acc` set, training ends early once it is reached.
///
/// A NaN loss or gradient ends the run early; the returned record then has
/// a failed status naming the epoch and batch.
pub fn fit(model: &mut ModelGraph, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<RunRecord> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::invalid(
            "fit",
            format!("needs at least 2 training samples, got {}", train.len()),
        ));
    }
    if val.is_empty() {
        return Err(Error::Empty("fit validation set"));
    }
    if let Some(tl) = cfg.trainable_layers {
        model.apply_freeze(tl)?;
    }
    if let Some(rate) = cfg.dropout_rate {
        model.set_dropout_rate(rate)?;
    }
    let mut opt = Optimizer::new(cfg.optimizer, model.params());
    let mut record = RunRecord {
        run: 0,
        fold: 0,
        config: cfg.clone(),
        status: RunStatus::Completed,
        curve: Vec::with_capacity(cfg.epochs),
        metrics: None,
        confusion: None,
        checkpoint_digest: String::new(),
        steps: 0,
        train_size: train.len(),
        val_size: val.len(),
        load_report: None,
    };
    let k = model.num_classes();
    'epochs: for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let epoch_seed = derive(cfg.seed, epoch as u64);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (bi, idx) in epoch_batches(train.len(), cfg.batch_size, epoch_seed)?
            .iter()
            .enumerate()
        {
            let (x, labels) = collate(train, idx)?;
            let (loss, logits) = model.train_batch(&x, &labels, derive(epoch_seed, bi as u64))?;
            if !loss.is_finite() {
                record.status = RunStatus::Failed {
                    epoch,
                    batch: bi,
                    reason: format!("loss is {loss}"),
                };
                break 'epochs;
            }
            match opt.step(model.params_mut(), cfg.learning_rate) {
                Ok(()) => {}
                Err(Error::NonFiniteGradient { name }) => {
                    record.status = RunStatus::Failed {
                        epoch,
                        batch: bi,
                        reason: format!("non-finite gradient in `{name}`"),
                    };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            record.steps += 1;
            loss_sum += loss as f64 * idx.len() as f64;
            correct += logits
                .data()
                .chunks(k)
                .zip(&labels)
                .filter(|(row, &y)| argmax(row) == y)
                .count();
        }
        let ev = evaluate(model, val, EVAL_BATCH)?;
        let val_acc = ev.report.acc.get().unwrap_or(f64::NAN);
        record.curve.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss: ev.report.loss.get().unwrap_or(f64::NAN),
            train_acc: correct as f64 / train.len() as f64,
            val_acc,
            val_auc: ev.report.auc.clone(),
            wall_seconds: cfg.record_wall_time.then(|| started.elapsed().as_secs_f64()),
        });
        let reached = cfg.stop_at_val_acc.is_some_and(|t| val_acc >= t);
        if epoch == cfg.epochs || reached {
            record.metrics = Some(ev.report);
            record.confusion = Some(ev.confusion);
            break;
        }
    }
    record.checkpoint_digest = model_digest(model)?;
    Ok(record)
}

fn is_head(model: &ModelGraph, name: &str) -> bool {
    name.starts_with(&format!("{}/", model.head().name))
}

/// Builds `model_cfg`, loads every compatible tensor of `base`, installs a
/// fresh head and trains. Head entries of `base` are always reported as
/// skipped.
pub fn finetune(
    base: &Checkpoint,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
) -> Result<(ModelGraph, RunRecord)> {
    cfg.validate()?;
    let mut model = ModelGraph::build(model_cfg)?;
    let mut report = load_partial(&mut model, base, LoadPolicy::SkipMismatched)?;
    let mut loaded = Vec::with_capacity(report.loaded.len());
    for name in std::mem::take(&mut report.loaded) {
        if is_head(&model, &name) {
            report.skipped.push(Skipped {
                name,
                reason: "classifier head is replaced".into(),
            });
        } else {
            loaded.push(name);
        }
    }
    report.loaded = loaded;
    model.reset_head(model_cfg.num_classes, model_cfg.seed)?;
    let mut record = fit(&mut model, train, val, cfg)?;
    record.load_report = Some(report);
    Ok((model, record))
}

/// One (run, fold) cell of a cross-validation plan.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldTask {
    pub run: usize,
    pub fold: usize,
    pub seed: u64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Every (run, fold) cell in run-major order.
pub fn crossval_plan(labels: &[usize], k: usize, runs: usize, seed: u64) -> Result<Vec<FoldTask>> {
    if runs == 0 {
        return Err(Error::invalid("crossval", "runs must be >= 1"));
    }
    let mut tasks = Vec::with_capacity(k * runs);
    for run in 0..runs {
        let folds = stratified_kfold(labels, k, derive(seed, run as u64))?;
        for fold in 0..k {
            tasks.push(FoldTask {
                run,
                fold,
                seed: seed.wrapping_add((run * k + fold) as u64),
                train: folds.training(fold),
                val: folds.validation(fold).to_vec(),
            });
        }
    }
    Ok(tasks)
}

/// Trains and validates one cell. With a base checkpoint the cell is a
/// fine-tuning run.
pub fn run_fold(
    task: &FoldTask,
    samples: &[Sample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    base: Option<&Checkpoint>,
) -> Result<RunRecord> {
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let (train, val) = (pick(&task.train), pick(&task.val));
    let seen: HashSet<&str> = train.iter().map(|s| s.id.as_str()).collect();
    if let Some(s) = val.iter().find(|s| seen.contains(s.id.as_str())) {
        return Err(Error::invalid(
            "crossval",
            format!("`{}` is in both training and validation", s.id),
        ));
    }
    let model_cfg = ModelConfig {
        seed: task.seed,
        ..model_cfg.clone()
    };
    let cfg = TrainConfig {
        seed: task.seed,
        ..cfg.clone()
    };
    let mut record = match base {
        Some(b) => finetune(b, &model_cfg, &cfg, &train, &val)?.1,
        None => fit(&mut ModelGraph::build(&model_cfg)?, &train, &val, &cfg)?,
    };
    record.run = task.run;
    record.fold = task.fold;
    Ok(record)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossvalResult {
    pub records: Vec<RunRecord>,
    /// Mean over completed records; `None` when every record failed.
    pub aggregate: Option<Aggregate>,
    pub failed: usize,
}

/// Mean report over the completed records, with the failure count.
pub fn summarize(records: Vec<RunRecord>) -> Result<CrossvalResult> {
    let reports: Vec<MetricsReport> = records.iter().filter_map(|r| r.metrics.clone()).collect();
    let failed = records.iter().filter(|r| r.failed()).count();
    let aggregate = if reports.is_empty() {
        None
    } else {
        Some(aggregate(&reports)?)
    };
    Ok(CrossvalResult {
        records,
        aggregate,
        failed,
    })
}

/// `runs` repetitions of stratified `k`-fold cross-validation.
pub fn crossval(
    samples: &[Sample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    k: usize,
    runs: usize,
    base: Option<&Checkpoint>,
) -> Result<CrossvalResult> {
    cfg.validate()?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let records = crossval_plan(&labels, k, runs, cfg.seed)?
        .iter()
        .map(|t| run_fold(t, samples, model_cfg, cfg, base))
        .collect::<Result<Vec<_>>>()?;
    summarize(records)
}

/// Writes one JSON object per line.
pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut out = Vec::new();
    for (i, r) in records.iter().enumerate() {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Record {
                path: path.to_path_buf(),
                line: i + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}
