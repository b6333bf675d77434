use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::{s, Scalar, Tensor};

pub const BN_EPSILON: f64 = 1e-3;
/// Weight of the previous running value in the exponential moving average.
pub const BN_MOMENTUM: f64 = 0.99;

/// Per-channel running statistics used in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T = f32> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> BnState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(vec![channels]),
            var: Tensor::full(vec![channels], T::one()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> BnState<U> {
        BnState {
            mean: self.mean.cast(),
            var: self.var.cast(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

fn check<T: Scalar>(input: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    let c = *input.shape().last().unwrap();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batchnorm",
            format!("{c} channels but gamma {:?} and beta {:?}", gamma.shape(), beta.shape()),
        ));
    }
    Ok(c)
}

/// Batch normalization over every axis but the last (channel) one.
///
/// Train mode normalizes with the biased batch variance and returns the
/// running state advanced by one moving-average step; eval mode normalizes
/// with `state` and returns it unchanged.
pub fn batchnorm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mode: Mode,
    state: &BnState<T>,
) -> Result<(Tensor<T>, BnState<T>, BnCache<T>)> {
    let c = check(input, gamma, beta)?;
    let x = input.data();
    let count = x.len() / c;
    let eps: T = s(BN_EPSILON);

    let (mean, var, next_state) = match mode {
        Mode::Train => {
            if count < 2 {
                return Err(Error::SingleElementBatch { count });
            }
            let mut sum = vec![0.0f64; c];
            for px in x.chunks_exact(c) {
                for (a, &v) in sum.iter_mut().zip(px) {
                    *a += v.to_f64_lossy();
                }
            }
            let mean: Vec<f64> = sum.iter().map(|v| v / count as f64).collect();
            let mut sq = vec![0.0f64; c];
            for px in x.chunks_exact(c) {
                for ((a, &v), m) in sq.iter_mut().zip(px).zip(&mean) {
                    let d = v.to_f64_lossy() - m;
                    *a += d * d;
                }
            }
            let var: Vec<f64> = sq.iter().map(|v| v / count as f64).collect();
            let blend = |run: &Tensor<T>, batch: &[f64]| {
                Tensor::from_fn(vec![c], |i| {
                    s(BN_MOMENTUM * run.data()[i].to_f64_lossy() + (1.0 - BN_MOMENTUM) * batch[i])
                })
            };
            let next = BnState {
                mean: blend(&state.mean, &mean),
                var: blend(&state.var, &var),
            };
            (
                mean.into_iter().map(s).collect::<Vec<T>>(),
                var.into_iter().map(s).collect::<Vec<T>>(),
                next,
            )
        }
        Mode::Eval => {
            if state.mean.shape() != [c] || state.var.shape() != [c] {
                return Err(Error::shape("batchnorm", "running state has the wrong channel count"));
            }
            (state.mean.data().to_vec(), state.var.data().to_vec(), state.clone())
        }
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for ((px, xh), o) in x
        .chunks_exact(c)
        .zip(xhat.chunks_exact_mut(c))
        .zip(out.chunks_exact_mut(c))
    {
        for i in 0..c {
            xh[i] = (px[i] - mean[i]) * inv_std[i];
            o[i] = gamma.data()[i] * xh[i] + beta.data()[i];
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), out)?,
        next_state,
        BnCache { xhat, inv_std, mode },
    ))
}

pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn batchnorm_backward<T: Scalar>(
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<BnGrads<T>> {
    let c = gamma.len();
    let dy = grad_out.data();
    if dy.len() != cache.xhat.len() || !dy.len().is_multiple_of(c) {
        return Err(Error::shape(
            "batchnorm_backward",
            format!(
                "upstream gradient has {} values, cache has {}",
                dy.len(),
                cache.xhat.len()
            ),
        ));
    }
    let count = dy.len() / c;
    let mut dbeta = vec![T::zero(); c];
    let mut dgamma = vec![T::zero(); c];
    for (g, xh) in dy.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
        for i in 0..c {
            dbeta[i] += g[i];
            dgamma[i] += g[i] * xh[i];
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    match cache.mode {
        Mode::Train => {
            let n = T::from_usize(count).unwrap();
            for ((d, g), xh) in dx
                .chunks_exact_mut(c)
                .zip(dy.chunks_exact(c))
                .zip(cache.xhat.chunks_exact(c))
            {
                for i in 0..c {
                    let k = gamma.data()[i] * cache.inv_std[i] / n;
                    d[i] = k * (n * g[i] - dbeta[i] - xh[i] * dgamma[i]);
                }
            }
        }
        Mode::Eval => {
            for (d, g) in dx.chunks_exact_mut(c).zip(dy.chunks_exact(c)) {
                for i in 0..c {
                    d[i] = g[i] * gamma.data()[i] * cache.inv_std[i];
                }
            }
        }
    }
    Ok(BnGrads {
        input: Tensor::new(grad_out.shape().to_vec(), dx)?,
        gamma: Tensor::new(vec![c], dgamma)?,
        beta: Tensor::new(vec![c], dbeta)?,
    })
}
