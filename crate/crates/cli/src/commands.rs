//! Command implementations. Each returns its in-memory result alongside the
//! printed summary so callers can inspect outcomes without re-reading files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use irnet::arch::{render_shape_table, ModelGraph};
use irnet::data::{gen_task, load_manifest, resize_all, stratified_kfold, Sample, Split};
use irnet::eval::{evaluate as run_eval, Evaluation};
use irnet::rng::derive;
use irnet::train::{self, CrossvalResult, RunRecord, RunStatus, TrainConfig, EVAL_BATCH};
use irnet::verify::{self, Precision};
use irnet::weights::{self, model_from_checkpoint, Checkpoint};
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::sweep::{best_cell, grid, SweepRow};
use crate::tables;
use crate::Common;

/// Resolves the config file and command-line overrides.
pub fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref(), common.desk)?;
    if let Some(m) = &common.manifest {
        cfg.data.manifest = Some(m.clone());
    }
    if common.synthetic {
        cfg.data.synthetic = true;
    }
    if let Some(seed) = common.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Samples of `split` resized to `size`. Synthetic test images come from a
/// seed derived from `data.seed`, so they never repeat training images.
pub fn load_samples(cfg: &ExperimentConfig, split: Split, size: usize) -> Result<Vec<Sample>> {
    let d = &cfg.data;
    if d.synthetic {
        let (n, seed) = match split {
            Split::Train => (d.samples, d.seed),
            Split::Test => (d.test_samples, derive(d.seed, 1)),
        };
        return Ok(resize_all(&gen_task(d.task, n, d.image_size, seed)?, size)?);
    }
    let Some(path) = &d.manifest else {
        bail!("no data source: set data.manifest, pass --manifest, or pass --synthetic");
    };
    let manifest = load_manifest(path)?;
    Ok(manifest.load_split(split, size)?)
}

/// Fold 0 of a stratified split of the training pool is held out.
pub fn holdout(cfg: &ExperimentConfig, pool: &[Sample]) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let labels: Vec<usize> = pool.iter().map(|s| s.label).collect();
    let folds = stratified_kfold(&labels, cfg.data.holdout_folds, cfg.data.seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| pool[i].clone()).collect::<Vec<_>>();
    Ok((pick(&folds.training(0)), pick(folds.validation(0))))
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::read(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn base_path(cfg: &ExperimentConfig, flag: Option<&Path>) -> Option<PathBuf> {
    flag.map(Path::to_path_buf).or_else(|| cfg.data.base_checkpoint.clone())
}

pub struct TrainOutput {
    pub record: RunRecord,
    pub summary: String,
}

/// `train` and `finetune`: writes `config.toml`, `run.jsonl`, `curve.csv`,
/// `model.irwt` and `metrics.txt`. A diverged run still writes its record
/// and then fails.
pub fn train(common: &Common, base: Option<&Path>) -> Result<TrainOutput> {
    let cfg = resolve(common)?;
    let out = &common.out;
    prepare_out(out)?;
    let pool = load_samples(&cfg, Split::Train, cfg.model.input_size)?;
    let (tr, val) = holdout(&cfg, &pool)?;
    let (model, record) = match base_path(&cfg, base) {
        Some(p) => train::finetune(&read_checkpoint(&p)?, &cfg.model, &cfg.train, &tr, &val)?,
        None => {
            let mut model = irnet::arch::build_model(&cfg.model)?;
            let record = train::fit(&mut model, &tr, &val, &cfg.train)?;
            (model, record)
        }
    };
    write_text(&out.join("config.toml"), &cfg.to_toml()?)?;
    train::write_records(&out.join("run.jsonl"), std::slice::from_ref(&record))?;
    tables::write_csv(
        &out.join("curve.csv"),
        &tables::CURVE_HEADER,
        &tables::curve_rows("train", std::slice::from_ref(&record)),
    )?;
    if let RunStatus::Failed { epoch, batch, reason } = &record.status {
        bail!("training diverged at epoch {epoch}, batch {batch}: {reason}");
    }
    weights::save(&model, &out.join("model.irwt"), &[])?;
    let report = record.metrics.as_ref().map(|m| m.render()).unwrap_or_default();
    write_text(&out.join("metrics.txt"), &report)?;
    let mut summary = format!(
        "trained {} epochs, {} steps on {} samples ({} held out)\n",
        record.curve.len(),
        record.steps,
        record.train_size,
        record.val_size
    );
    summary.push_str(&report);
    Ok(TrainOutput { record, summary })
}

pub struct CrossvalOutput {
    pub result: CrossvalResult,
    pub summary: String,
}

/// `crossval`: writes `records.jsonl`, `crossval.csv` (one row per record
/// and a `mean` row) and `crossval.txt`.
pub fn crossval(common: &Common, k: Option<usize>, runs: Option<usize>) -> Result<CrossvalOutput> {
    let mut cfg = resolve(common)?;
    cfg.crossval.k = k.unwrap_or(cfg.crossval.k);
    cfg.crossval.runs = runs.unwrap_or(cfg.crossval.runs);
    cfg.validate()?;
    let out = &common.out;
    prepare_out(out)?;
    let pool = load_samples(&cfg, Split::Train, cfg.model.input_size)?;
    let base = base_path(&cfg, None).map(|p| read_checkpoint(&p)).transpose()?;
    let result = train::crossval(
        &pool,
        &cfg.model,
        &cfg.train,
        cfg.crossval.k,
        cfg.crossval.runs,
        base.as_ref(),
    )?;
    let agg = result.aggregate.as_ref();
    train::write_records(&out.join("records.jsonl"), &result.records)?;
    tables::write_csv(
        &out.join("crossval.csv"),
        &tables::crossval_header(),
        &tables::crossval_rows(&result.records, agg),
    )?;
    let summary = tables::crossval_text(result.records.len(), result.failed, agg);
    write_text(&out.join("crossval.txt"), &summary)?;
    Ok(CrossvalOutput { result, summary })
}

pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    pub best: Option<usize>,
    pub summary: String,
}

/// `sweep`: one cell per (lr, bs, tl). Writes `sweep.csv`, `sweep.jsonl`
/// with every underlying record, and `best.txt`.
pub fn sweep(common: &Common, parallel: bool) -> Result<SweepOutput> {
    let cfg = resolve(common)?;
    let out = &common.out;
    prepare_out(out)?;
    let s = &cfg.sweep;
    let tls = if s.trainable_layers.is_empty() {
        let all = irnet::arch::build_model(&cfg.model)?.layer_count();
        vec![cfg.train.trainable_layers.unwrap_or(all)]
    } else {
        s.trainable_layers.clone()
    };
    let cells = grid(&s.learning_rates, &s.batch_sizes, &tls);
    ensure!(!cells.is_empty(), "sweep grid is empty");
    let pool = load_samples(&cfg, Split::Train, cfg.model.input_size)?;
    let (tr, val) = holdout(&cfg, &pool)?;
    let base = base_path(&cfg, None).map(|p| read_checkpoint(&p)).transpose()?;
    let run_cell = |&(lr, bs, tl): &(f64, usize, usize)| -> (SweepRow, Vec<RunRecord>) {
        let tc = TrainConfig {
            learning_rate: lr,
            batch_size: bs,
            trainable_layers: Some(tl),
            ..cfg.train.clone()
        };
        let outcome = if s.crossval {
            train::crossval(&pool, &cfg.model, &tc, cfg.crossval.k, cfg.crossval.runs, base.as_ref())
        } else {
            let single = match &base {
                Some(b) => train::finetune(b, &cfg.model, &tc, &tr, &val).map(|(_, r)| r),
                None => ModelGraph::build(&cfg.model).and_then(|mut m| train::fit(&mut m, &tr, &val, &tc)),
            };
            single.and_then(|r| train::summarize(vec![r]))
        };
        let mut row = SweepRow {
            lr,
            bs,
            tl,
            val_acc: None,
            val_loss: None,
            status: "ok".into(),
        };
        match outcome {
            Ok(res) => {
                if let Some(a) = &res.aggregate {
                    row.val_acc = a.report.acc.get();
                    row.val_loss = a.report.loss.get();
                }
                if let Some(r) = res.records.iter().find(|r| r.failed()) {
                    row.status = tables::status_cell(&r.status);
                    if res.failed < res.records.len() {
                        row.status = format!("{} of {} runs {}", res.failed, res.records.len(), row.status);
                    }
                }
                (row, res.records)
            }
            Err(e) => {
                row.status = format!("failed: {e}");
                (row, Vec::new())
            }
        }
    };
    let results: Vec<(SweepRow, Vec<RunRecord>)> = if parallel || s.parallel {
        cells.par_iter().map(run_cell).collect()
    } else {
        cells.iter().map(run_cell).collect()
    };
    let (rows, records): (Vec<SweepRow>, Vec<Vec<RunRecord>>) = results.into_iter().unzip();
    let records: Vec<RunRecord> = records.into_iter().flatten().collect();
    tables::write_csv(
        &out.join("sweep.csv"),
        &tables::SWEEP_HEADER,
        &tables::sweep_rows(&rows),
    )?;
    train::write_records(&out.join("sweep.jsonl"), &records)?;
    let best = best_cell(&rows);
    let failed = rows.iter().filter(|r| !r.ok()).count();
    let mut summary = format!("{} cells, {failed} failed\n", rows.len());
    match best {
        Some(i) => {
            let b = &rows[i];
            let acc = b.val_acc.map(tables::num).unwrap_or_default();
            let _ = writeln!(
                summary,
                "best lr={} bs={} tl={} val_acc={acc}",
                tables::num(b.lr),
                b.bs,
                b.tl
            );
        }
        None => summary.push_str("best none\n"),
    }
    write_text(&out.join("best.txt"), &summary)?;
    Ok(SweepOutput { rows, best, summary })
}

pub struct EvalOutput {
    pub evaluation: Evaluation,
    pub samples: Vec<Sample>,
    pub summary: String,
}

fn evaluate_checkpoint(common: &Common, checkpoint: &Path, split: Split) -> Result<EvalOutput> {
    let cfg = resolve(common)?;
    prepare_out(&common.out)?;
    let model = model_from_checkpoint(&read_checkpoint(checkpoint)?)?;
    let samples = load_samples(&cfg, split, model.config().input_size)?;
    let evaluation = run_eval(&model, &samples, EVAL_BATCH)?;
    Ok(EvalOutput {
        evaluation,
        samples,
        summary: String::new(),
    })
}

/// `evaluate`: writes `metrics.txt`, `evaluation.json` and `scores.csv`.
pub fn evaluate(common: &Common, checkpoint: &Path, split: Split) -> Result<EvalOutput> {
    let mut o = evaluate_checkpoint(common, checkpoint, split)?;
    let out = &common.out;
    let ev = &o.evaluation;
    o.summary = ev.report.render();
    write_text(&out.join("metrics.txt"), &o.summary)?;
    write_text(
        &out.join("evaluation.json"),
        &(serde_json::to_string_pretty(ev)? + "\n"),
    )?;
    let rows: Vec<Vec<String>> = o
        .samples
        .iter()
        .zip(&ev.scores)
        .zip(&ev.predictions)
        .map(|((s, &score), &pred)| vec![s.id.clone(), s.label.to_string(), tables::num(score), pred.to_string()])
        .collect();
    tables::write_csv(&out.join("scores.csv"), &["id", "label", "score", "prediction"], &rows)?;
    Ok(o)
}

/// `confusion`: writes the 2×2 grid followed by the report to
/// `confusion.txt`.
pub fn confusion(common: &Common, checkpoint: &Path, split: Split) -> Result<EvalOutput> {
    let mut o = evaluate_checkpoint(common, checkpoint, split)?;
    o.summary = format!("{}\n{}", o.evaluation.confusion.render(), o.evaluation.report.render());
    write_text(&common.out.join("confusion.txt"), &o.summary)?;
    Ok(o)
}

fn record_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            found.retain(|f| f.extension().is_some_and(|x| x == "jsonl"));
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

/// `export-curves`: one long table with columns [`tables::CURVE_HEADER`],
/// sorted by (source, run, fold, epoch). `source` is the record file's path
/// as given.
pub fn export_curves(inputs: &[PathBuf], out: &Path) -> Result<String> {
    let mut rows = Vec::new();
    let mut runs = 0;
    for file in record_files(inputs)? {
        let records = train::read_records(&file)?;
        runs += records.len();
        rows.extend(tables::curve_rows(&file.display().to_string(), &records));
    }
    ensure!(runs > 0, "no run records found");
    let key = |r: &Vec<String>| -> (String, usize, usize, usize) {
        let n = |i: usize| r[i].parse().unwrap_or(usize::MAX);
        (r[0].clone(), n(1), n(2), n(3))
    };
    rows.sort_by_key(key);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        prepare_out(dir)?;
    }
    tables::write_csv(out, &tables::CURVE_HEADER, &rows)?;
    Ok(format!("{} rows from {runs} runs\n", rows.len()))
}

/// `weights inspect`: metadata, then one line per tensor with its digest.
pub fn inspect(path: &Path) -> Result<String> {
    let ckpt = read_checkpoint(path)?;
    let mut out = format!("format version {}\n", ckpt.version);
    for (k, v) in &ckpt.metadata {
        let _ = writeln!(out, "meta {k} = {v}");
    }
    for e in &ckpt.entries {
        let t = irnet::Tensor::new(e.shape.clone(), e.data.clone())?;
        let _ = writeln!(
            out,
            "{:<48} {:<20} {}",
            e.name,
            format!("{:?}", e.shape),
            &weights::tensor_digest(&t)[..16]
        );
    }
    let _ = writeln!(out, "{} tensors, {} scalars", ckpt.entries.len(), ckpt.scalar_count());
    Ok(out)
}

/// `weights convert-head`: reloads the checkpoint's model, reinitializes
/// the head for `classes` outputs and saves it to `out`.
pub fn convert_head(path: &Path, classes: usize, out: &Path, seed: u64) -> Result<String> {
    let mut model = model_from_checkpoint(&read_checkpoint(path)?)?;
    model.reset_head(classes, seed)?;
    weights::save(&model, out, &[])?;
    Ok(format!("wrote {} with a {classes}-class head\n", out.display()))
}

pub fn shapes(common: &Common) -> Result<String> {
    let cfg = resolve(common)?;
    let model = irnet::arch::build_model(&cfg.model)?;
    let mut out = render_shape_table(&model.shape_table()?);
    let _ = writeln!(
        out,
        "{} layers, {} parameters",
        model.layer_count(),
        model.count_params()
    );
    Ok(out)
}

/// `gradcheck`: every primitive on `instances` random cases, then the
/// configured model end to end in both precisions.
pub fn gradcheck(common: &Common, instances: usize) -> Result<String> {
    let cfg = resolve(common)?;
    let mut out = String::new();
    let mut failed = 0;
    for c in verify::primitive_suite(instances, cfg.train.seed) {
        failed += usize::from(!c.passed());
        let _ = writeln!(
            out,
            "{} {:<24} {:?} max_rel {:.3e} tol {:.0e} ({} of {} failed)",
            if c.passed() { "PASS" } else { "FAIL" },
            c.name,
            c.precision,
            c.max_rel_error,
            c.tolerance,
            c.failures,
            c.instances
        );
    }
    let model = irnet::arch::build_model(&cfg.model)?;
    for precision in [Precision::F32, Precision::F64] {
        let check = verify::end_to_end_config(precision);
        let report = match precision {
            Precision::F32 => verify::end_to_end(&mut model.clone(), check)?,
            Precision::F64 => verify::end_to_end(&mut model.cast::<f64>(), check)?,
        };
        failed += usize::from(!report.passed);
        let _ = writeln!(
            out,
            "{} {:<24} {precision:?} max_rel {:.3e} tol {:.0e}",
            if report.passed { "PASS" } else { "FAIL" },
            "end_to_end",
            report.max_rel_error(),
            report.tolerance
        );
    }
    ensure!(failed == 0, "{out}{failed} gradient checks failed");
    Ok(out)
}
