//! Cartoon radiographs for desk-scale runs.
//!
//! Every image is a smooth Gaussian blob over a dim background with pixel
//! noise. Opacities are bright filled ellipses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::rng::{derive, standard_normal, stream};
use crate::tensor::Tensor;

pub const NOISE_SIGMA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    /// Class 1 carries 3 to 5 opacities, class 0 none.
    Opacity,
    /// Every image carries opacities; the class says whether they sit in
    /// the left (0) or right (1) half.
    OpacitySide,
}

/// `n` samples of the opacity-presence task, classes alternating 0, 1, ...
pub fn gen_synthetic(n: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    gen_task(SyntheticTask::Opacity, n, size, seed)
}

pub fn gen_task(task: SyntheticTask, n: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    if !n.is_multiple_of(2) {
        return Err(Error::invalid("gen_synthetic", format!("n must be even, got {n}")));
    }
    if size < 8 {
        return Err(Error::invalid(
            "gen_synthetic",
            format!("image size must be >= 8, got {size}"),
        ));
    }
    let tag = match task {
        SyntheticTask::Opacity => "opacity",
        SyntheticTask::OpacitySide => "side",
    };
    (0..n)
        .map(|i| {
            let label = i % 2;
            let mut rng = stream(derive(seed, i as u64), tag);
            let image = render(task, label, size, &mut rng)?;
            Ok(Sample {
                image,
                label,
                id: format!("synthetic/{tag}/{seed}/{i:06}"),
            })
        })
        .collect()
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ay: f64,
    ax: f64,
    cos: f64,
    sin: f64,
    gain: f64,
}

fn render(task: SyntheticTask, label: usize, size: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let s = size as f64;
    let background = rng.random_range(0.0..0.25);
    let amp = rng.random_range(0.25..0.75);
    let sigma = rng.random_range(0.15..0.35) * s;
    let (by, bx) = (rng.random_range(0.3..0.7) * s, rng.random_range(0.3..0.7) * s);

    let count = match (task, label) {
        (SyntheticTask::Opacity, 0) => 0,
        _ => rng.random_range(3..=5),
    };
    let (x_lo, x_hi) = match (task, label) {
        (SyntheticTask::OpacitySide, 0) => (0.12, 0.42),
        (SyntheticTask::OpacitySide, _) => (0.58, 0.88),
        _ => (0.12, 0.88),
    };
    let ellipses: Vec<Ellipse> = (0..count)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            Ellipse {
                cy: rng.random_range(0.12..0.88) * s,
                cx: rng.random_range(x_lo..x_hi) * s,
                ay: rng.random_range(0.06..0.12) * s,
                ax: rng.random_range(0.06..0.12) * s,
                cos: theta.cos(),
                sin: theta.sin(),
                gain: rng.random_range(0.35..0.6),
            }
        })
        .collect();

    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let d2 = (py - by).powi(2) + (px - bx).powi(2);
            let mut v = background + amp * (-d2 / (2.0 * sigma * sigma)).exp();
            for e in &ellipses {
                let (dy, dx) = (py - e.cy, px - e.cx);
                let u = dx * e.cos + dy * e.sin;
                let w = -dx * e.sin + dy * e.cos;
                if (u / e.ax).powi(2) + (w / e.ay).powi(2) <= 1.0 {
                    v += e.gain;
                }
            }
            v += NOISE_SIGMA * standard_normal(rng);
            let v = v.clamp(0.0, 1.0) as f32;
            data.extend([v; 3]);
        }
    }
    Tensor::new(vec![size, size, 3], data)
}
