use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `shortcut + scale · branch`.
pub fn residual_add_scaled<T: Scalar>(shortcut: &Tensor<T>, branch: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    if shortcut.shape() != branch.shape() {
        return Err(Error::shape(
            "residual_add_scaled",
            format!("shortcut {:?} vs branch {:?}", shortcut.shape(), branch.shape()),
        ));
    }
    let data = shortcut
        .data()
        .iter()
        .zip(branch.data())
        .map(|(&a, &b)| a + scale * b)
        .collect();
    Tensor::new(shortcut.shape().to_vec(), data)
}

/// Returns `(d_shortcut, d_branch)`.
pub fn residual_add_scaled_backward<T: Scalar>(grad_out: &Tensor<T>, scale: T) -> (Tensor<T>, Tensor<T>) {
    (grad_out.clone(), grad_out.map(|g| g * scale))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_branch_returns_shortcut() {
        let a = Tensor::<f32>::from_fn(vec![1, 2, 2, 1], |i| i as f32);
        let y = residual_add_scaled(&a, &Tensor::zeros(vec![1, 2, 2, 1]), 0.3).unwrap();
        assert_eq!(y, a);
    }

    #[test]
    fn scalar_example() {
        let y = residual_add_scaled(&Tensor::<f32>::full(vec![3], 1.0), &Tensor::full(vec![3], 2.0), 0.2).unwrap();
        for &v in y.data() {
            assert!((v - 1.4).abs() < 1e-6);
        }
        let (ds, db) = residual_add_scaled_backward(&Tensor::<f32>::full(vec![3], 5.0), 0.2);
        assert_eq!(ds.data(), &[5.0; 3]);
        assert!(db.data().iter().all(|&g| (g - 1.0).abs() < 1e-6));
    }

    #[test]
    fn shape_mismatch() {
        let a = Tensor::<f32>::zeros(vec![2]);
        let b = Tensor::<f32>::zeros(vec![3]);
        assert!(residual_add_scaled(&a, &b, 0.2).is_err());
    }
}
