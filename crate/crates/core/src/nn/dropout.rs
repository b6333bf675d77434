use rand::Rng;

use crate::rng::stream;
use crate::tensor::{Scalar, Tensor};

/// Inverted dropout. Returns the output and the per-element multiplier
/// (`0` or `1 / (1 - rate)`), which is also the backward mask.
pub fn dropout<T: Scalar>(input: &Tensor<T>, rate: f64, seed: u64) -> (Tensor<T>, Vec<T>) {
    if rate <= 0.0 {
        return (input.clone(), vec![T::one(); input.len()]);
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    let mut rng = stream(seed, "dropout");
    let mask: Vec<T> = (0..input.len())
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let data = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    (Tensor::new(input.shape().to_vec(), data).expect("same shape"), mask)
}

pub fn dropout_backward<T: Scalar>(mask: &[T], grad_out: &Tensor<T>) -> Tensor<T> {
    let data = grad_out.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
    Tensor::new(grad_out.shape().to_vec(), data).expect("same shape")
}
