//! Comma-separated table writers. Every table is UTF-8 with a header row;
//! floats use the shortest representation that parses back to the same
//! `f64`, so exports are lossless.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use irnet::eval::{sci, Aggregate, Value, METRIC_NAMES};
use irnet::train::{RunRecord, RunStatus};

use crate::sweep::SweepRow;

pub const CURVE_HEADER: [&str; 9] = [
    "source",
    "run",
    "fold",
    "epoch",
    "train_loss",
    "val_loss",
    "train_acc",
    "val_acc",
    "val_auc",
];

pub const SWEEP_HEADER: [&str; 6] = ["lr", "bs", "tl", "val_acc", "val_loss", "status"];

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn value_cell(v: &Value) -> String {
    match v.get() {
        Some(x) => num(x),
        None => "undefined".into(),
    }
}

pub fn status_cell(status: &RunStatus) -> String {
    match status {
        RunStatus::Completed => "ok".into(),
        RunStatus::Failed { epoch, batch, reason } => format!("failed: epoch {epoch} batch {batch}: {reason}"),
    }
}

/// One row per epoch of every record, tagged with `source`.
pub fn curve_rows(source: &str, records: &[RunRecord]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for r in records {
        for e in &r.curve {
            rows.push(vec![
                source.to_string(),
                r.run.to_string(),
                r.fold.to_string(),
                e.epoch.to_string(),
                num(e.train_loss),
                num(e.val_loss),
                num(e.train_acc),
                num(e.val_acc),
                value_cell(&e.val_auc),
            ]);
        }
    }
    rows
}

pub fn crossval_header() -> Vec<&'static str> {
    let mut h = vec!["run", "fold", "status"];
    h.extend(METRIC_NAMES);
    h
}

/// Per-record rows followed by one `mean` row.
pub fn crossval_rows(records: &[RunRecord], agg: Option<&Aggregate>) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for r in records {
        let mut row = vec![r.run.to_string(), r.fold.to_string(), status_cell(&r.status)];
        match &r.metrics {
            Some(m) => row.extend(m.values().iter().map(|v| value_cell(v))),
            None => row.extend(METRIC_NAMES.iter().map(|_| "undefined".to_string())),
        }
        rows.push(row);
    }
    let mut row = vec!["mean".to_string(), String::new()];
    match agg {
        Some(a) => {
            row.push(format!("n={}", a.count));
            row.extend(a.report.values().iter().map(|v| value_cell(v)));
        }
        None => {
            row.push("n=0".into());
            row.extend(METRIC_NAMES.iter().map(|_| "undefined".to_string()));
        }
    }
    rows.push(row);
    rows
}

/// Aggregate report in scientific notation, one metric per line.
pub fn crossval_text(records: usize, failed: usize, agg: Option<&Aggregate>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "records  {records}");
    let _ = writeln!(out, "failed   {failed}");
    if let Some(a) = agg {
        for (name, v) in METRIC_NAMES.iter().zip(a.report.values()) {
            let skipped = a.skipped.get(*name).copied().unwrap_or(0);
            let cell = v.get().map(sci).unwrap_or_else(|| "undefined".into());
            if skipped > 0 {
                let _ = writeln!(out, "{:<4} {cell}  ({skipped} skipped)", name.to_uppercase());
            } else {
                let _ = writeln!(out, "{:<4} {cell}", name.to_uppercase());
            }
        }
    }
    out
}

pub fn sweep_rows(rows: &[SweepRow]) -> Vec<Vec<String>> {
    let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
    rows.iter()
        .map(|r| {
            vec![
                num(r.lr),
                r.bs.to_string(),
                r.tl.to_string(),
                opt(r.val_acc),
                opt(r.val_loss),
                r.status.clone(),
            ]
        })
        .collect()
}
