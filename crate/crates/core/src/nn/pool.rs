use crate::error::{Error, Result};
use crate::nn::conv::{window_geometry, Padding};
use crate::tensor::{Scalar, Tensor};

struct PoolGeometry {
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    pt: usize,
    pl: usize,
    window: usize,
    stride: usize,
}

impl PoolGeometry {
    fn new<T: Scalar>(
        op: &'static str,
        input: &Tensor<T>,
        window: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (b, h, w, c) = input.dims4(op)?;
        let (oh, pt) = window_geometry(op, h, window, stride, padding)?;
        let (ow, pl) = window_geometry(op, w, window, stride, padding)?;
        Ok(Self {
            b,
            h,
            w,
            c,
            oh,
            ow,
            pt,
            pl,
            window,
            stride,
        })
    }

    /// In-bounds input rows/cols covered by output position `(oy, ox)`.
    fn span(&self, oy: usize, ox: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let y0 = (oy * self.stride) as isize - self.pt as isize;
        let x0 = (ox * self.stride) as isize - self.pl as isize;
        let ys = y0.max(0) as usize..((y0 + self.window as isize).min(self.h as isize)) as usize;
        let xs = x0.max(0) as usize..((x0 + self.window as isize).min(self.w as isize)) as usize;
        (ys, xs)
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.b, self.oh, self.ow, self.c]
    }

    fn check_grad<T: Scalar>(&self, op: &'static str, grad: &Tensor<T>) -> Result<()> {
        if grad.shape() != self.out_shape() {
            return Err(Error::shape(
                op,
                format!("upstream gradient {:?}, expected {:?}", grad.shape(), self.out_shape()),
            ));
        }
        Ok(())
    }
}

/// Max pooling. Returns the pooled tensor and, for every output element, the
/// flat input index it was taken from. Ties go to the lowest flat index.
pub fn maxpool2d<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let g = PoolGeometry::new("maxpool2d", input, window, stride, padding)?;
    let x = input.data();
    let mut out = Vec::with_capacity(g.b * g.oh * g.ow * g.c);
    let mut argmax = Vec::with_capacity(out.capacity());
    for n in 0..g.b {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let (ys, xs) = g.span(oy, ox);
                for ch in 0..g.c {
                    let mut best = usize::MAX;
                    let mut best_v = T::neg_infinity();
                    for iy in ys.clone() {
                        for ix in xs.clone() {
                            let idx = ((n * g.h + iy) * g.w + ix) * g.c + ch;
                            if best == usize::MAX || x[idx] > best_v {
                                best = idx;
                                best_v = x[idx];
                            }
                        }
                    }
                    out.push(best_v);
                    argmax.push(best);
                }
            }
        }
    }
    Ok((Tensor::new(g.out_shape(), out)?, argmax))
}

pub fn maxpool2d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape(
            "maxpool2d_backward",
            format!("{} routes for {} gradients", argmax.len(), grad_out.len()),
        ));
    }
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    Ok(dx)
}

/// Average pooling over the in-bounds part of each window (padding cells are
/// not counted), so a constant field stays constant under same-padding.
pub fn avgpool2d<T: Scalar>(input: &Tensor<T>, window: usize, stride: usize, padding: Padding) -> Result<Tensor<T>> {
    let g = PoolGeometry::new("avgpool2d", input, window, stride, padding)?;
    let x = input.data();
    let mut out = vec![T::zero(); g.b * g.oh * g.ow * g.c];
    let mut o = 0;
    for n in 0..g.b {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let (ys, xs) = g.span(oy, ox);
                let inv = T::one() / T::from_usize(ys.len() * xs.len()).unwrap();
                let dst = &mut out[o..o + g.c];
                for iy in ys {
                    for ix in xs.clone() {
                        let src = ((n * g.h + iy) * g.w + ix) * g.c;
                        for (d, &v) in dst.iter_mut().zip(&x[src..src + g.c]) {
                            *d += v;
                        }
                    }
                }
                dst.iter_mut().for_each(|d| *d *= inv);
                o += g.c;
            }
        }
    }
    Tensor::new(g.out_shape(), out)
}

pub fn avgpool2d_backward<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let g = PoolGeometry::new("avgpool2d_backward", input, window, stride, padding)?;
    g.check_grad("avgpool2d_backward", grad_out)?;
    let dy = grad_out.data();
    let mut dx = vec![T::zero(); input.len()];
    let mut o = 0;
    for n in 0..g.b {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let (ys, xs) = g.span(oy, ox);
                let inv = T::one() / T::from_usize(ys.len() * xs.len()).unwrap();
                let src = &dy[o..o + g.c];
                for iy in ys {
                    for ix in xs.clone() {
                        let dst = ((n * g.h + iy) * g.w + ix) * g.c;
                        for (d, &v) in dx[dst..dst + g.c].iter_mut().zip(src) {
                            *d += v * inv;
                        }
                    }
                }
                o += g.c;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), dx)
}

/// Mean over the spatial axes: `(B,H,W,C) -> (B,C)`.
pub fn global_avgpool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, h, w, c) = input.dims4("global_avgpool")?;
    let inv = T::one() / T::from_usize(h * w).unwrap();
    let mut out = vec![T::zero(); b * c];
    for (n, sample) in input.data().chunks_exact(h * w * c).enumerate() {
        let dst = &mut out[n * c..(n + 1) * c];
        for px in sample.chunks_exact(c) {
            for (d, &v) in dst.iter_mut().zip(px) {
                *d += v;
            }
        }
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    Tensor::new(vec![b, c], out)
}

pub fn global_avgpool_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, h, w, c] = *input_shape else {
        return Err(Error::shape("global_avgpool_backward", format!("{input_shape:?}")));
    };
    if grad_out.shape() != [b, c] {
        return Err(Error::shape(
            "global_avgpool_backward",
            format!("upstream gradient {:?}, expected [{b}, {c}]", grad_out.shape()),
        ));
    }
    let inv = T::one() / T::from_usize(h * w).unwrap();
    let mut dx = vec![T::zero(); b * h * w * c];
    for (n, sample) in dx.chunks_exact_mut(h * w * c).enumerate() {
        let g = &grad_out.data()[n * c..(n + 1) * c];
        for px in sample.chunks_exact_mut(c) {
            for (d, &v) in px.iter_mut().zip(g) {
                *d = v * inv;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_is_preserved() {
        let x = Tensor::<f32>::full(vec![2, 5, 5, 3], 0.25);
        for padding in [Padding::Same, Padding::Valid] {
            let (m, _) = maxpool2d(&x, 3, 2, padding).unwrap();
            let a = avgpool2d(&x, 3, 1, padding).unwrap();
            assert!(m.data().iter().all(|&v| v == 0.25));
            assert!(a.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        }
    }

    #[test]
    fn two_by_two_window() {
        let x = Tensor::new(vec![1, 2, 2, 1], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let (m, idx) = maxpool2d(&x, 2, 2, Padding::Valid).unwrap();
        assert_eq!(m.data(), &[4.0]);
        assert_eq!(idx, vec![3]);
        let a = avgpool2d(&x, 2, 2, Padding::Valid).unwrap();
        assert_eq!(a.data(), &[2.5]);
    }

    #[test]
    fn max_gradient_goes_to_argmax_only() {
        let x = Tensor::new(vec![1, 2, 2, 1], vec![1.0f32, 5.0, 3.0, 4.0]).unwrap();
        let (_, idx) = maxpool2d(&x, 2, 2, Padding::Valid).unwrap();
        let dx = maxpool2d_backward(x.shape(), &idx, &Tensor::full(vec![1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn max_ties_break_to_lowest_index() {
        let x = Tensor::new(vec![1, 2, 2, 1], vec![2.0f32, 7.0, 7.0, 7.0]).unwrap();
        let (_, idx) = maxpool2d(&x, 2, 2, Padding::Valid).unwrap();
        assert_eq!(idx, vec![1]);
    }

    #[test]
    fn global_pool_means_each_channel() {
        let x = Tensor::new(vec![1, 2, 1, 2], vec![1.0f32, 10.0, 3.0, 20.0]).unwrap();
        let y = global_avgpool(&x).unwrap();
        assert_eq!(y.data(), &[2.0, 15.0]);
    }
}
