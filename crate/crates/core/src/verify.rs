//! Finite-difference verification of every layer primitive and of a whole
//! network.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::arch::{ModelConfig, ModelGraph};
use crate::error::Result;
use crate::nn::gradcheck::{dot, probe};
use crate::nn::{self, check_sampled, BnState, GradCheckConfig, GradCheckReport, Mode, Padding};
use crate::rng::stream;
use crate::tensor::{Scalar, Tensor};

/// Parameters probed by [`end_to_end`], one or more per stage.
pub const PROBED: [&str; 10] = [
    "stem/conv1/kernel",
    "stem/split2/b1_conv2/gamma",
    "stem/split3/b0_conv/beta",
    "block_a1/b2_conv2/kernel",
    "block_a1/proj/bias",
    "reduction_a/b1_conv/kernel",
    "block_b1/b1_conv2/kernel",
    "block_c1/b1_conv3/beta",
    "block_c1/proj/kernel",
    "head/dense/kernel",
];

/// Central-difference step for whole-network checks. Thousands of ReLU and
/// max-pool kinks sit downstream of every stem weight and steps of 1e-6 and
/// up routinely straddle one; the reference is 64-bit, so a small step costs
/// no precision.
pub const KINK_SAFE_STEP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Outcome of checking one primitive on many random instances.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub precision: Precision,
    pub instances: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// First problem that stopped an instance from being checked.
    pub note: Option<String>,
}

impl PrimitiveCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

type Op<T> = Box<dyn Fn(&[Tensor<T>]) -> Result<(T, Vec<Tensor<T>>)>>;

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(lo..hi)))
}

/// Values at least `gap` apart from each other and from zero, so steps
/// below `gap / 2` never cross a ReLU or max-pool kink.
fn spaced<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, gap: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut levels: Vec<f64> = (0..n).map(|i| (i as f64 + 1.0) * gap).collect();
    crate::rng::shuffle(&mut levels, rng);
    let mut it = levels.into_iter();
    Tensor::from_fn(shape, |_| {
        let v = it.next().expect("one level per element");
        T::from_f64_lossy(if rng.random_bool(0.5) { v } else { -v })
    })
}

fn padding(rng: &mut ChaCha8Rng) -> Padding {
    if rng.random_bool(0.5) {
        Padding::Same
    } else {
        Padding::Valid
    }
}

fn image_shape(rng: &mut ChaCha8Rng, min_hw: usize) -> Vec<usize> {
    vec![
        rng.random_range(1..=2),
        rng.random_range(min_hw..=6),
        rng.random_range(min_hw..=6),
        rng.random_range(1..=3),
    ]
}

fn conv_case<T: Scalar>(rng: &mut ChaCha8Rng, seed: u64) -> (Vec<Tensor<T>>, Op<T>) {
    let x = image_shape(rng, 3);
    let (kh, kw) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let cout = rng.random_range(1..=3);
    let stride = rng.random_range(1..=2);
    let pad = padding(rng);
    let inputs = vec![
        uniform(rng, x.clone(), -1.0, 1.0),
        uniform(rng, vec![kh, kw, x[3], cout], -1.0, 1.0),
        uniform(rng, vec![cout], -1.0, 1.0),
    ];
    let op: Op<T> = Box::new(move |v| {
        let y = nn::conv2d(&v[0], &v[1], Some(&v[2]), stride, pad)?;
        let r = probe(y.shape(), seed);
        let g = nn::conv2d_backward(&v[0], &v[1], stride, pad, &r, true, true)?;
        Ok((
            dot(&y, &r),
            vec![g.input.expect("requested"), g.kernel.expect("requested"), g.bias],
        ))
    });
    (inputs, op)
}

fn dense_case<T: Scalar>(rng: &mut ChaCha8Rng, seed: u64) -> (Vec<Tensor<T>>, Op<T>) {
    let (b, n, m) = (
        rng.random_range(1..=4),
        rng.random_range(1..=6),
        rng.random_range(1..=4),
    );
    let inputs = vec![
        uniform(rng, vec![b, n], -1.0, 1.0),
        uniform(rng, vec![n, m], -1.0, 1.0),
        uniform(rng, vec![m], -1.0, 1.0),
    ];
    let op: Op<T> = Box::new(move |v| {
        let y = nn::dense(&v[0], &v[1], &v[2])?;
        let r = probe(y.shape(), seed);
        let g = nn::dense_backward(&v[0], &v[1], &r)?;
        Ok((dot(&y, &r), vec![g.input, g.weight, g.bias]))
    });
    (inputs, op)
}

fn relu_case<T: Scalar>(rng: &mut ChaCha8Rng, seed: u64) -> (Vec<Tensor<T>>, Op<T>) {
    let shape = image_shape(rng, 1);
    let inputs = vec![spaced(rng, shape, 0.05)];
    let op: Op<T> = Box::new(move |v| {
        let y = nn::relu(&v[0]);
        let r = probe(y.shape(), seed);
        Ok((dot(&y, &r), vec![nn::relu_backward(&y, &r)?]))
    });
    (inputs, op)
}

fn batchnorm_case<T: Scalar>(rng: &mut ChaCha8Rng, seed: u64, mode: Mode) -> (Vec<Tensor<T>>, Op<T>) {
    let mut shape = image_shape(rng, 2);
    shape[0] = 2;
    let c = shape[3];
    let mut state = BnState::<T>::new(c);
    state.mean = uniform(rng, vec![c], -0.5, 0.5);
    state.var = uniform(rng, vec![c], 0.5, 2.0);
    let inputs = vec![
        uniform(rng, shape, -1.0, 1.0),
        uniform(rng, vec![c], 0.5, 1.5),
        uniform(rng, vec![c], -0.5, 0.5),
    ];
    let op: Op<T> = Box::new(move |v| {
        let (y, _, cache) = nn::batchnorm(&v[0], &v[1], &v[2], mode, &state)?;
        let r = probe(y.shape(), seed);
        let g = nn::batchnorm_backward(&cache, &v[1], &r)?;
        Ok((dot(&y, &r), vec![g.input, g.gamma, g.beta]))
    });
    (inputs, op)
}

fn maxpool_case<T: Scalar>(rng: &mut ChaCha8Rng, seed: u64) -> (Vec<Tensor<T>>, Op<T>) {
    let shape = image_shape(rng, 3);
    let (window, stride, pad) = (rng.random_range(2..=3), rng.random_range(1..=2), padding(rng));
    let inputs = vec![spaced(rng, shape, 0.05)];
    let op: Op<T> = Box::new(move |v| {
        let (y, argmax) = nn::maxpool2d(&v[0], window, stride, pad)?;
        let r = probe(y.shape(), seed);
        Ok((dot(&y, &r), vec![nn::maxpool2d_backward(v[0].shape(), &argmax, &r)?]))
    });
    (inputs, op)
}

fn avgpool_case<T: Scalar>(rng: &mut ChaCha8Rng, seed: u64) -> (Vec<Tensor<T>>, Op<T>) {
    let shape = image_shape(rng, 3);
    let (window, stride, pad) = (rng.random_range(1..=3), rng.random_range(1..=2), padding(rng));
    let inputs = vec![uniform(rng, shape, -1.0, 1.0)];
    let op: Op<T> = Box::new(move |v| {
        let y = nn::avgpool2d(&v[0], window, stride, pad)?;
        let r = probe(y.shape(), seed);
        Ok((
            dot(&y, &r),
            vec![nn::avgpool2d_backward(&v[0], window, stride, pad, &r)?],
        ))
    });
    (inputs, op)
}

fn global_pool_case<T: Scalar>(rng: &mut ChaCha8Rng, seed: u64) -> (Vec<Tensor<T>>, Op<T>) {
    let shape = image_shape(rng, 1);
    let inputs = vec![uniform(rng, shape, -1.0, 1.0)];
    let op: Op<T> = Box::new(move |v| {
        let y = nn::global_avgpool(&v[0])?;
        let r = probe(y.shape(), seed);
        Ok((dot(&y, &r), vec![nn::global_avgpool_backward(v[0].shape(), &r)?]))
    });
    (inputs, op)
}

fn concat_case<T: Scalar>(rng: &mut ChaCha8Rng, seed: u64) -> (Vec<Tensor<T>>, Op<T>) {
    let base = image_shape(rng, 1);
    let parts = rng.random_range(2..=3);
    let inputs: Vec<Tensor<T>> = (0..parts)
        .map(|_| {
            let mut s = base.clone();
            s[3] = rng.random_range(1..=3);
            uniform(rng, s, -1.0, 1.0)
        })
        .collect();
    let op: Op<T> = Box::new(move |v| {
        let refs: Vec<&Tensor<T>> = v.iter().collect();
        let y = nn::concat_channels(&refs)?;
        let r = probe(y.shape(), seed);
        let widths: Vec<usize> = v.iter().map(|t| t.shape()[3]).collect();
        Ok((dot(&y, &r), nn::split_channels(&r, &widths)?))
    });
    (inputs, op)
}

fn residual_case<T: Scalar>(rng: &mut ChaCha8Rng, seed: u64) -> (Vec<Tensor<T>>, Op<T>) {
    let shape = image_shape(rng, 1);
    let scale = T::from_f64_lossy(rng.random_range(0.1..1.0));
    let inputs = vec![uniform(rng, shape.clone(), -1.0, 1.0), uniform(rng, shape, -1.0, 1.0)];
    let op: Op<T> = Box::new(move |v| {
        let y = nn::residual_add_scaled(&v[0], &v[1], scale)?;
        let r = probe(y.shape(), seed);
        let (a, b) = nn::residual_add_scaled_backward(&r, scale);
        Ok((dot(&y, &r), vec![a, b]))
    });
    (inputs, op)
}

fn dropout_case<T: Scalar>(rng: &mut ChaCha8Rng, seed: u64) -> (Vec<Tensor<T>>, Op<T>) {
    let n = rng.random_range(2..=5);
    let rate = rng.random_range(0.1..0.6);
    let b = rng.random_range(1..=3);
    let inputs = vec![uniform(rng, vec![b, n], -1.0, 1.0)];
    let op: Op<T> = Box::new(move |v| {
        let (y, mask) = nn::dropout(&v[0], rate, seed);
        let r = probe(y.shape(), seed);
        Ok((dot(&y, &r), vec![nn::dropout_backward(&mask, &r)]))
    });
    (inputs, op)
}

fn softmax_xent_case<T: Scalar>(rng: &mut ChaCha8Rng, _seed: u64) -> (Vec<Tensor<T>>, Op<T>) {
    let (b, k) = (rng.random_range(1..=4), rng.random_range(2..=5));
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
    let inputs = vec![uniform(rng, vec![b, k], -3.0, 3.0)];
    let op: Op<T> = Box::new(move |v| {
        let (loss, g) = nn::softmax_cross_entropy(&v[0], &labels)?;
        Ok((loss, vec![g]))
    });
    (inputs, op)
}

type CaseFn<T> = fn(&mut ChaCha8Rng, u64) -> (Vec<Tensor<T>>, Op<T>);

/// A named primitive with its case generator at precision `A` and in 64-bit.
type Case<A> = (&'static str, (CaseFn<A>, CaseFn<f64>));

/// Analytic gradients from the `A` instantiation of a primitive, central
/// differences from its 64-bit instantiation at the same point.
fn check_primitive<A: Scalar>(
    name: &'static str,
    precision: Precision,
    (case, reference): (CaseFn<A>, CaseFn<f64>),
    instances: usize,
    seed: u64,
    cfg: GradCheckConfig,
) -> PrimitiveCheck {
    let mut out = PrimitiveCheck {
        name,
        precision,
        instances,
        failures: 0,
        max_rel_error: 0.0,
        tolerance: cfg.tolerance,
        note: None,
    };
    for i in 0..instances {
        let s = seed.wrapping_add(i as u64);
        let mut rng = stream(s, name);
        let (inputs, op) = case(&mut rng.clone(), s);
        let (_, op_ref) = reference(&mut rng, s);
        let report = match op(&inputs) {
            Ok((_, grads)) => {
                let analytic: Vec<Vec<f64>> = grads
                    .iter()
                    .map(|g| g.data().iter().map(|v| v.to_f64_lossy()).collect())
                    .collect();
                let mut work: Vec<Tensor<f64>> = inputs.iter().map(Tensor::cast).collect();
                check_sampled(&analytic, &cfg.with_seed(i as u64), |k, coord, delta| {
                    let orig = work[k].data()[coord];
                    work[k].data_mut()[coord] = orig + delta;
                    let loss = op_ref(&work).map(|(l, _)| l);
                    work[k].data_mut()[coord] = orig;
                    loss
                })
            }
            Err(e) => {
                out.failures += 1;
                out.note.get_or_insert(format!("instance {i}: {e}"));
                continue;
            }
        };
        out.max_rel_error = out.max_rel_error.max(report.max_rel_error());
        if !report.passed {
            out.failures += 1;
            let worst = report.max_rel_error();
            out.note.get_or_insert(
                report
                    .failure
                    .unwrap_or_else(|| format!("instance {i}: relative error {worst:e}")),
            );
        }
    }
    out
}

fn bn_train<T: Scalar>(rng: &mut ChaCha8Rng, seed: u64) -> (Vec<Tensor<T>>, Op<T>) {
    batchnorm_case(rng, seed, Mode::Train)
}

fn bn_eval<T: Scalar>(rng: &mut ChaCha8Rng, seed: u64) -> (Vec<Tensor<T>>, Op<T>) {
    batchnorm_case(rng, seed, Mode::Eval)
}

/// Every primitive's 32-bit gradient at [`GradCheckConfig::single`], plus
/// dense, ReLU and softmax cross-entropy entirely in 64-bit at
/// [`GradCheckConfig::double`].
pub fn primitive_suite(instances: usize, seed: u64) -> Vec<PrimitiveCheck> {
    let single = GradCheckConfig::single();
    let double = GradCheckConfig::double();
    let f32_cases: [Case<f32>; 12] = [
        ("conv2d", (conv_case, conv_case)),
        ("dense", (dense_case, dense_case)),
        ("relu", (relu_case, relu_case)),
        ("batchnorm_train", (bn_train, bn_train)),
        ("batchnorm_eval", (bn_eval, bn_eval)),
        ("maxpool2d", (maxpool_case, maxpool_case)),
        ("avgpool2d", (avgpool_case, avgpool_case)),
        ("global_avgpool", (global_pool_case, global_pool_case)),
        ("concat_channels", (concat_case, concat_case)),
        ("residual_add_scaled", (residual_case, residual_case)),
        ("dropout", (dropout_case, dropout_case)),
        ("softmax_cross_entropy", (softmax_xent_case, softmax_xent_case)),
    ];
    let f64_cases: [Case<f64>; 3] = [
        ("dense", (dense_case, dense_case)),
        ("relu", (relu_case, relu_case)),
        ("softmax_cross_entropy", (softmax_xent_case, softmax_xent_case)),
    ];
    let mut out: Vec<PrimitiveCheck> = f32_cases
        .iter()
        .map(|&(name, case)| check_primitive(name, Precision::F32, case, instances, seed, single))
        .collect();
    out.extend(
        f64_cases
            .iter()
            .map(|&(name, case)| check_primitive(name, Precision::F64, case, instances, seed, double)),
    );
    out
}

/// Deterministic pseudo-images in `[0, 1]` for `cfg`'s input shape.
pub fn probe_images(batch: usize, cfg: &ModelConfig, seed: u64) -> Tensor {
    let mut rng = stream(seed, "verify/images");
    let s = cfg.input_size;
    Tensor::from_fn(vec![batch, s, s, cfg.input_channels], |_| rng.random::<f32>())
}

/// Checks the analytic gradient of `model` (scalar type `T`) on the
/// [`PROBED`] parameters against central differences of a 64-bit copy of
/// the same network, in train mode on a 4-image batch.
pub fn end_to_end<T: Scalar>(model: &mut ModelGraph<T>, cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let x = probe_images(4, model.config(), 11);
    let labels = [0, 1, 1, 0];
    model.loss_and_grads(&x.cast(), &labels, 5)?;
    let ids: Vec<usize> = PROBED
        .iter()
        .map(|n| {
            model
                .params()
                .iter()
                .position(|p| p.name == *n)
                .ok_or_else(|| crate::Error::invalid("end_to_end", format!("model has no `{n}`")))
        })
        .collect::<Result<_>>()?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&i| model.params()[i].grad.data().iter().map(|g| g.to_f64_lossy()).collect())
        .collect();
    let mut reference = model.cast::<f64>();
    let x64 = x.cast::<f64>();
    Ok(check_sampled(&analytic, &cfg, |input, coord, delta| {
        let id = ids[input];
        let orig = reference.params()[id].value.data()[coord];
        reference.params_mut()[id].value.data_mut()[coord] = orig + delta;
        let (logits, _) = reference.forward_tape(&x64, Mode::Train, 5)?;
        reference.params_mut()[id].value.data_mut()[coord] = orig;
        Ok(nn::softmax_cross_entropy(&logits, &labels)?.0)
    }))
}

/// End-to-end check settings: 32-bit tolerance 1e-3, or 64-bit tolerance
/// 1e-3 (the kinks cap what finite differences can resolve), both at
/// [`KINK_SAFE_STEP`] on 12 coordinates per probed tensor.
pub fn end_to_end_config(precision: Precision) -> GradCheckConfig {
    let base = match precision {
        Precision::F32 => GradCheckConfig::single(),
        Precision::F64 => GradCheckConfig {
            tolerance: 1e-3,
            ..GradCheckConfig::double()
        },
    };
    GradCheckConfig {
        step: KINK_SAFE_STEP,
        samples_per_input: 12,
        ..base
    }
}
