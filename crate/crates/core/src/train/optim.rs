//! Adam and SGD with momentum over trainable parameters.

use serde::{Deserialize, Serialize};

use crate::arch::LayerParams;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-7;
pub const SGD_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    SgdMomentum,
}

/// First and second moment estimates, one slot per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Steps taken so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[LayerParams]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            t: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(params: &[LayerParams]) -> Self {
        Self {
            velocity: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }
}

fn check_state(params: &[LayerParams], slots: &[Vec<f64>]) -> Result<()> {
    let ok = params.len() == slots.len() && params.iter().zip(slots).all(|(p, s)| p.value.len() == s.len());
    if ok {
        Ok(())
    } else {
        Err(Error::shape("optimizer", "state does not match the parameter list"))
    }
}

/// Fails on the first trainable parameter holding a NaN or infinite gradient.
pub fn check_gradients(params: &[LayerParams]) -> Result<()> {
    match params
        .iter()
        .find(|p| p.trainable && p.grad.data().iter().any(|g| !g.is_finite()))
    {
        Some(p) => Err(Error::NonFiniteGradient { name: p.name.clone() }),
        None => Ok(()),
    }
}

/// One bias-corrected Adam update of every trainable parameter. Nothing is
/// written when any gradient is non-finite.
pub fn adam_step(params: &mut [LayerParams], state: &mut AdamState, lr: f64) -> Result<()> {
    check_state(params, &state.m)?;
    check_gradients(params)?;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if !p.trainable {
            continue;
        }
        let LayerParams { value, grad, .. } = p;
        for (((x, &g), m), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let g = g as f64;
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let step = lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPSILON);
            *x = (*x as f64 - step) as f32;
        }
    }
    Ok(())
}

/// `velocity = μ·velocity − lr·g; param += velocity` on trainable tensors.
pub fn sgd_momentum_step(params: &mut [LayerParams], state: &mut SgdState, lr: f64) -> Result<()> {
    check_state(params, &state.velocity)?;
    check_gradients(params)?;
    for (p, vel) in params.iter_mut().zip(&mut state.velocity) {
        if !p.trainable {
            continue;
        }
        let LayerParams { value, grad, .. } = p;
        for ((x, &g), u) in value.data_mut().iter_mut().zip(grad.data()).zip(vel.iter_mut()) {
            *u = SGD_MOMENTUM * *u - lr * g as f64;
            *x = (*x as f64 + *u) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Adam(AdamState),
    SgdMomentum(SgdState),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &[LayerParams]) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(params)),
            OptimizerKind::SgdMomentum => Optimizer::SgdMomentum(SgdState::new(params)),
        }
    }

    pub fn step(&mut self, params: &mut [LayerParams], lr: f64) -> Result<()> {
        match self {
            Optimizer::Adam(s) => adam_step(params, s, lr),
            Optimizer::SgdMomentum(s) => sgd_momentum_step(params, s, lr),
        }
    }
}
