//! Samples, manifests, image decoding, folds, batching and the synthetic
//! two-class generator.

pub mod manifest;
pub mod pnm;
mod synthetic;

pub use manifest::{layout_manifest, load_manifest, DatasetManifest, ManifestRow, Split, CLASS_NAMES};
pub use synthetic::{gen_synthetic, gen_task, SyntheticTask};

use crate::error::{Error, Result};
use crate::rng::{shuffle, stream};
use crate::tensor::Tensor;

/// One labelled image, `(H, W, C)` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    /// 0 = Normal, 1 = Pneumonia.
    pub label: usize,
    pub id: String,
}

/// Bilinear resize of an `(H, W, C)` image to `target`×`target`.
///
/// Output pixel `d` samples the source at `(d + 0.5)·in/out − 0.5`, clamped
/// to the valid range, so pixel centres line up and an identity resize is
/// exact.
pub fn resize_bilinear(image: &Tensor, target: usize) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::shape(
            "resize_bilinear",
            format!("expected (H, W, C), got {:?}", image.shape()),
        ));
    }
    if target == 0 {
        return Err(Error::invalid("resize_bilinear", "target must be >= 1"));
    }
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if (h, w) == (target, target) {
        return Ok(image.clone());
    }
    let taps = |n_in: usize| -> Vec<(usize, usize, f32)> {
        (0..target)
            .map(|d| {
                let src = ((d as f64 + 0.5) * n_in as f64 / target as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let (ys, xs) = (taps(h), taps(w));
    let src = image.data();
    let mut out = Vec::with_capacity(target * target * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![target, target, c], out)
}

/// Resizes every sample to `target`×`target`.
pub fn resize_all(samples: &[Sample], target: usize) -> Result<Vec<Sample>> {
    samples
        .iter()
        .map(|s| {
            Ok(Sample {
                image: resize_bilinear(&s.image, target)?,
                label: s.label,
                id: s.id.clone(),
            })
        })
        .collect()
}

/// `k` disjoint validation folds, as indices into the labelled list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldAssignment {
    pub folds: Vec<Vec<usize>>,
}

impl FoldAssignment {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn validation(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    /// Every index outside `fold`, ascending.
    pub fn training(&self, fold: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(f, _)| *f != fold)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        idx.sort_unstable();
        idx
    }
}

/// Stratified k-fold split of `labels`.
///
/// Each class's indices are shuffled under `seed`, the classes are laid end
/// to end, and the combined sequence is dealt round-robin to the folds. Fold
/// sizes, and each class's count per fold, then differ by at most one.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::invalid("stratified_kfold", format!("k must be >= 2, got {k}")));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut order = Vec::with_capacity(labels.len());
    for class in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            return Err(Error::FoldTooSmall {
                k,
                class,
                count: members.len(),
            });
        }
        shuffle(&mut members, &mut stream(seed, &format!("kfold/class{class}")));
        order.extend(members);
    }
    let mut folds = vec![Vec::new(); k];
    for (i, idx) in order.into_iter().enumerate() {
        folds[i % k].push(idx);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldAssignment { folds })
}

/// Index batches covering `0..n` once. The order is shuffled under `seed`
/// when `shuffle` is set; the last batch may be short.
pub fn batches(n: usize, batch_size: usize, seed: u64, shuffled: bool) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Empty("batches"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batches", "batch size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffled {
        shuffle(&mut order, &mut stream(seed, "batches"));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Stacks the selected samples into a `(B, H, W, C)` batch with labels.
pub fn collate(samples: &[Sample], indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let images: Vec<&Tensor> = indices.iter().map(|&i| &samples[i].image).collect();
    let labels = indices.iter().map(|&i| samples[i].label).collect();
    Ok((Tensor::stack(&images)?, labels))
}
