use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Row-wise softmax of `(B,K)` logits, computed with max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = logits.dims2("softmax")?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(k) {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean categorical cross-entropy over the batch and its gradient with
/// respect to the logits, `(softmax - onehot) / B`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (b, k) = logits.dims2("softmax_cross_entropy")?;
    if labels.len() != b {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{b} rows of logits but {} labels", labels.len()),
        ));
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k, row });
    }
    let inv_b = T::one() / T::from_usize(b).unwrap();
    let mut total = T::zero();
    let mut grad = vec![T::zero(); b * k];
    for ((row, g), &label) in logits.data().chunks_exact(k).zip(grad.chunks_exact_mut(k)).zip(labels) {
        let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let sum = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
        let log_sum = sum.ln();
        // -log softmax[label] = log(sum exp(z - max)) - (z_label - max)
        total += log_sum - (row[label] - max);
        for (j, gv) in g.iter_mut().enumerate() {
            let p = (row[j] - max - log_sum).exp();
            let onehot = if j == label { T::one() } else { T::zero() };
            *gv = (p - onehot) * inv_b;
        }
    }
    Ok((total * inv_b, Tensor::new(vec![b, k], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let (loss, _) = softmax_cross_entropy(&Tensor::<f64>::zeros(vec![1, 2]), &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn saturated_logits_are_stable() {
        let logits = Tensor::new(vec![1, 2], vec![1000.0f32, -1000.0]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-6);
        assert!(grad.is_finite());
        let (loss, _) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!((loss - 2000.0).abs() < 1e-3);
    }

    #[test]
    fn worked_example() {
        let logits = Tensor::new(vec![1, 2], vec![1.0f64, 2.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[1]).unwrap();
        // ln(1 + e^-1), evaluated to 20 digits: 0.31326168751822283405
        assert!((loss - 0.313_261_687_518_222_8).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_label() {
        let err = softmax_cross_entropy(&Tensor::<f32>::zeros(vec![2, 2]), &[0, 2]).unwrap_err();
        assert!(matches!(
            err,
            Error::LabelOutOfRange {
                label: 2,
                classes: 2,
                row: 1
            }
        ));
    }
}
