use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Concatenates `(B,H,W,Ci)` tensors along the channel axis, in order.
pub fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs.first().ok_or(Error::Empty("concat_channels"))?;
    let (b, h, w, _) = first.dims4("concat_channels")?;
    let mut widths = Vec::with_capacity(inputs.len());
    for t in inputs {
        let (tb, th, tw, tc) = t.dims4("concat_channels")?;
        if (tb, th, tw) != (b, h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("expected spatial (B,H,W) = ({b},{h},{w}), got ({tb},{th},{tw})"),
            ));
        }
        widths.push(tc);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(b * h * w * total);
    for px in 0..b * h * w {
        for (t, &c) in inputs.iter().zip(&widths) {
            out.extend_from_slice(&t.data()[px * c..(px + 1) * c]);
        }
    }
    Tensor::new(vec![b, h, w, total], out)
}

/// Inverse of [`concat_channels`]: splits the channel axis into consecutive
/// pieces of the given widths. Also serves as the concat backward pass.
pub fn split_channels<T: Scalar>(input: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (b, h, w, c) = input.dims4("split_channels")?;
    if widths.iter().sum::<usize>() != c || widths.contains(&0) {
        return Err(Error::shape(
            "split_channels",
            format!("widths {widths:?} do not partition {c} channels"),
        ));
    }
    let mut parts: Vec<Vec<T>> = widths.iter().map(|&wd| Vec::with_capacity(b * h * w * wd)).collect();
    for px in input.data().chunks_exact(c) {
        let mut off = 0;
        for (part, &wd) in parts.iter_mut().zip(widths) {
            part.extend_from_slice(&px[off..off + wd]);
            off += wd;
        }
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(data, &wd)| Tensor::new(vec![b, h, w, wd], data))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_is_identity() {
        let x = Tensor::<f32>::from_fn(vec![1, 2, 2, 3], |i| i as f32);
        assert_eq!(concat_channels(&[&x]).unwrap(), x);
    }

    #[test]
    fn channel_order_follows_arguments() {
        let a = Tensor::<f32>::full(vec![1, 2, 2, 2], 1.0);
        let b = Tensor::<f32>::full(vec![1, 2, 2, 3], 2.0);
        let y = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 5]);
        for px in y.data().chunks(5) {
            assert_eq!(px, &[1.0, 1.0, 2.0, 2.0, 2.0]);
        }
    }

    #[test]
    fn spatial_mismatch_is_an_error() {
        let a = Tensor::<f32>::zeros(vec![1, 2, 2, 2]);
        let b = Tensor::<f32>::zeros(vec![1, 3, 2, 2]);
        assert!(matches!(concat_channels(&[&a, &b]), Err(Error::Shape { .. })));
    }
}
