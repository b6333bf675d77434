//! Central finite-difference gradient verification.
//!
//! The relative error at a coordinate is
//! `|analytic - numeric| / max(|analytic|, |numeric|, floor)`. The floor keeps
//! coordinates whose true gradient is essentially zero from dominating the
//! report with roundoff; it is part of the config and is reported alongside
//! the tolerance.

use rand::Rng;

use crate::error::Result;
use crate::rng::{shuffle, stream};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    /// Coordinates sampled per input; inputs this small or smaller are
    /// checked exhaustively.
    pub samples_per_input: usize,
    pub seed: u64,
}

impl GradCheckConfig {
    /// Settings for checking 32-bit analytic gradients against central
    /// differences taken in 64-bit.
    pub fn single() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-3,
            floor: 1e-4,
            samples_per_input: 64,
            seed: 0,
        }
    }

    /// Settings for the 64-bit verification mode.
    pub fn double() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-6,
            floor: 1e-6,
            samples_per_input: 64,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputReport {
    pub input: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_coord: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tolerance: f64,
    pub passed: bool,
    /// Set when the check could not run to completion (non-finite analytic
    /// gradient, failing forward pass).
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    fn failed(tolerance: f64, reason: String) -> Self {
        Self {
            inputs: Vec::new(),
            tolerance,
            passed: false,
            failure: Some(reason),
        }
    }
}

/// Compares `analytic[i][coord]` with the central difference
/// `(L(+h) - L(-h)) / 2h`, where `loss_at(i, coord, delta)` evaluates the
/// loss with coordinate `coord` of input `i` shifted by `delta`.
pub fn check_sampled(
    analytic: &[Vec<f64>],
    cfg: &GradCheckConfig,
    mut loss_at: impl FnMut(usize, usize, f64) -> Result<f64>,
) -> GradCheckReport {
    let mut reports = Vec::with_capacity(analytic.len());
    let mut rng = stream(cfg.seed, "gradcheck");
    for (i, grad) in analytic.iter().enumerate() {
        if let Some(pos) = grad.iter().position(|g| !g.is_finite()) {
            return GradCheckReport::failed(
                cfg.tolerance,
                format!("analytic gradient of input {i} is non-finite at coordinate {pos}"),
            );
        }
        let mut coords: Vec<usize> = (0..grad.len()).collect();
        if coords.len() > cfg.samples_per_input {
            shuffle(&mut coords, &mut rng);
            coords.truncate(cfg.samples_per_input);
            coords.sort_unstable();
        }
        let mut report = InputReport {
            input: i,
            checked: coords.len(),
            max_rel_error: 0.0,
            worst_coord: coords.first().copied().unwrap_or(0),
        };
        for &coord in &coords {
            let up = loss_at(i, coord, cfg.step);
            let down = loss_at(i, coord, -cfg.step);
            let (up, down) = match (up, down) {
                (Ok(u), Ok(d)) => (u, d),
                (Err(e), _) | (_, Err(e)) => {
                    return GradCheckReport::failed(cfg.tolerance, format!("loss evaluation failed: {e}"))
                }
            };
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = grad[coord];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            if !rel.is_finite() {
                return GradCheckReport::failed(
                    cfg.tolerance,
                    format!("non-finite finite difference at input {i}, coordinate {coord}"),
                );
            }
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_coord = coord;
            }
        }
        reports.push(report);
    }
    let passed = reports.iter().all(|r| r.max_rel_error < cfg.tolerance);
    GradCheckReport {
        inputs: reports,
        tolerance: cfg.tolerance,
        passed,
        failure: None,
    }
}

/// Checks `op`, which maps inputs to `(loss, gradient per input)`.
pub fn grad_check<T: Scalar>(
    op: impl Fn(&[Tensor<T>]) -> Result<(T, Vec<Tensor<T>>)>,
    inputs: &[Tensor<T>],
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    let grads = match op(inputs) {
        Ok((_, g)) => g,
        Err(e) => return GradCheckReport::failed(cfg.tolerance, format!("forward failed: {e}")),
    };
    if grads.len() != inputs.len() {
        return GradCheckReport::failed(
            cfg.tolerance,
            format!("{} gradients for {} inputs", grads.len(), inputs.len()),
        );
    }
    let analytic: Vec<Vec<f64>> = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v.to_f64_lossy()).collect())
        .collect();
    let mut work = inputs.to_vec();
    check_sampled(&analytic, cfg, |i, coord, delta| {
        let orig = work[i].data()[coord];
        work[i].data_mut()[coord] = orig + T::from_f64_lossy(delta);
        let loss = op(&work).map(|(l, _)| l.to_f64_lossy());
        work[i].data_mut()[coord] = orig;
        loss
    })
}

/// Random weights `r` used to reduce a tensor-valued op to the scalar
/// `sum(out * r)`, whose upstream gradient is `r` itself.
pub fn probe<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = stream(seed, "gradcheck/probe");
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(rng.random::<f64>() * 2.0 - 1.0))
}

pub fn dot<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> T {
    a.data()
        .iter()
        .zip(b.data())
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catches_a_wrong_gradient() {
        let x = Tensor::<f64>::from_fn(vec![4], |i| i as f64 + 1.0);
        let good = |xs: &[Tensor<f64>]| Ok((xs[0].data().iter().map(|v| v * v).sum(), vec![xs[0].map(|v| 2.0 * v)]));
        let bad = |xs: &[Tensor<f64>]| Ok((xs[0].data().iter().map(|v| v * v).sum(), vec![xs[0].map(|v| 2.1 * v)]));
        assert!(grad_check(good, std::slice::from_ref(&x), &GradCheckConfig::double()).passed);
        assert!(!grad_check(bad, &[x], &GradCheckConfig::double()).passed);
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let x = Tensor::<f64>::zeros(vec![2]);
        let op = |xs: &[Tensor<f64>]| Ok((0.0, vec![xs[0].map(|_| f64::NAN)]));
        let report = grad_check(op, &[x], &GradCheckConfig::double());
        assert!(!report.passed);
        assert!(report.failure.unwrap().contains("non-finite"));
    }
}
