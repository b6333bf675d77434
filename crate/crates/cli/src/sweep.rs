//! Hyperparameter grid over learning rate, batch size and trainable layers.

use serde::{Deserialize, Serialize};

/// One grid cell and its outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lr: f64,
    pub bs: usize,
    pub tl: usize,
    /// Validation accuracy (mean over folds when cross-validated).
    pub val_acc: Option<f64>,
    pub val_loss: Option<f64>,
    /// `ok`, or `failed` with the reason.
    pub status: String,
}

impl SweepRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Cartesian product in lr-major, then batch size, then TL order.
pub fn grid(lrs: &[f64], batch_sizes: &[usize], tls: &[usize]) -> Vec<(f64, usize, usize)> {
    let mut cells = Vec::with_capacity(lrs.len() * batch_sizes.len() * tls.len());
    for &lr in lrs {
        for &bs in batch_sizes {
            for &tl in tls {
                cells.push((lr, bs, tl));
            }
        }
    }
    cells
}

/// Index of the best completed cell by validation accuracy. Ties go to the
/// lower learning rate, then the smaller batch size, then the smaller TL.
pub fn best_cell(rows: &[SweepRow]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        let Some(acc) = r.val_acc.filter(|_| r.ok()) else {
            continue;
        };
        let better = match best {
            None => true,
            Some(j) => {
                let b = &rows[j];
                let b_acc = b.val_acc.expect("best has accuracy");
                acc > b_acc || (acc == b_acc && (r.lr, r.bs, r.tl) < (b.lr, b.bs, b.tl))
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}
