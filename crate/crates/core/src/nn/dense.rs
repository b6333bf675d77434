use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `input · weight + bias` for `input (B,D)`, `weight (D,K)`, `bias (K)`.
pub fn dense<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, d) = input.dims2("dense")?;
    let (wd, k) = weight.dims2("dense")?;
    if wd != d {
        return Err(Error::shape(
            "dense",
            format!("input has {d} features but weight expects {wd}"),
        ));
    }
    if bias.shape() != [k] {
        return Err(Error::shape(
            "dense",
            format!("bias shape {:?} does not match {k} outputs", bias.shape()),
        ));
    }
    let mut out = vec![T::zero(); b * k];
    for row in out.chunks_exact_mut(k) {
        row.copy_from_slice(bias.data());
    }
    T::gemm(b, d, k, input.data(), false, weight.data(), false, &mut out, true);
    Tensor::new(vec![b, k], out)
}

pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn dense_backward<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, grad_out: &Tensor<T>) -> Result<DenseGrads<T>> {
    let (b, d) = input.dims2("dense_backward")?;
    let (_, k) = weight.dims2("dense_backward")?;
    if grad_out.shape() != [b, k] {
        return Err(Error::shape(
            "dense_backward",
            format!("upstream gradient {:?}, expected [{b}, {k}]", grad_out.shape()),
        ));
    }
    let dy = grad_out.data();
    let mut dx = vec![T::zero(); b * d];
    T::gemm(b, k, d, dy, false, weight.data(), true, &mut dx, false);
    let mut dw = vec![T::zero(); d * k];
    T::gemm(d, b, k, input.data(), true, dy, false, &mut dw, false);
    let mut db = vec![T::zero(); k];
    for row in dy.chunks_exact(k) {
        for (a, &v) in db.iter_mut().zip(row) {
            *a += v;
        }
    }
    Ok(DenseGrads {
        input: Tensor::new(vec![b, d], dx)?,
        weight: Tensor::new(vec![d, k], dw)?,
        bias: Tensor::new(vec![k], db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight() {
        let x = Tensor::new(vec![3, 2], vec![1.0f32, -2.0, 3.5, 0.0, 7.0, 8.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(dense(&x, &w, &Tensor::zeros(vec![2])).unwrap(), x);
    }

    #[test]
    fn hand_arithmetic() {
        let x = Tensor::new(vec![1, 2], vec![1.0f32, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(dense(&x, &w, &b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn output_shape_and_mismatch() {
        let x = Tensor::<f32>::zeros(vec![5, 4]);
        let w = Tensor::zeros(vec![4, 3]);
        assert_eq!(dense(&x, &w, &Tensor::zeros(vec![3])).unwrap().shape(), &[5, 3]);
        let bad = Tensor::zeros(vec![3, 3]);
        assert!(matches!(
            dense(&x, &bad, &Tensor::zeros(vec![3])),
            Err(Error::Shape { .. })
        ));
    }
}
