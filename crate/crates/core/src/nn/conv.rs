use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output extent `ceil(in / stride)`; odd padding puts the extra row or
    /// column at the bottom/right.
    Same,
    /// No padding; output extent `floor((in - window) / stride) + 1`.
    Valid,
}

/// Output extent and leading padding along one spatial axis.
pub fn window_geometry(
    op: &'static str,
    input: usize,
    window: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    if window == 0 || stride == 0 {
        return Err(Error::invalid(op, "window and stride must be >= 1"));
    }
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + window).saturating_sub(input);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if window > input {
                return Err(Error::EmptyOutput {
                    op,
                    detail: format!("window {window} exceeds unpadded extent {input}"),
                });
            }
            Ok(((input - window) / stride + 1, 0))
        }
    }
}

/// Everything needed to map between an input tensor and its im2col matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn new(
        op: &'static str,
        input_shape: (usize, usize, usize, usize),
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (batch, in_h, in_w, in_c) = input_shape;
        let (out_h, pad_top) = window_geometry(op, in_h, kernel_h, stride, padding)?;
        let (out_w, pad_left) = window_geometry(op, in_w, kernel_w, stride, padding)?;
        Ok(Self {
            batch,
            in_h,
            in_w,
            in_c,
            kernel_h,
            kernel_w,
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    /// Rows of the im2col matrix: one per output pixel.
    pub fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Columns of the im2col matrix: one per receptive-field element.
    pub fn patch(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_c
    }

    /// True when the im2col matrix is the input itself.
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1
    }

    /// Calls `f(col_index, input_index)` for every in-bounds receptive field
    /// element, row by row.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let patch = self.patch();
        let c = self.in_c;
        let mut row = 0;
        for b in 0..self.batch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let base = row * patch;
                    for ky in 0..self.kernel_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                            if ix < 0 || ix >= self.in_w as isize {
                                continue;
                            }
                            let src = ((b * self.in_h + iy as usize) * self.in_w + ix as usize) * c;
                            let dst = base + (ky * self.kernel_w + kx) * c;
                            f(dst, src);
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    pub fn im2col<T: Scalar>(&self, input: &[T]) -> Vec<T> {
        if self.is_pointwise() {
            return input.to_vec();
        }
        let c = self.in_c;
        let mut cols = vec![T::zero(); self.rows() * self.patch()];
        self.for_each_tap(|dst, src| cols[dst..dst + c].copy_from_slice(&input[src..src + c]));
        cols
    }

    /// Scatter-adds an im2col-shaped gradient back onto the input layout.
    pub fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        if self.is_pointwise() {
            return cols.to_vec();
        }
        let c = self.in_c;
        let mut out = vec![T::zero(); self.batch * self.in_h * self.in_w * c];
        self.for_each_tap(|dst, src| {
            for (o, &g) in out[src..src + c].iter_mut().zip(&cols[dst..dst + c]) {
                *o += g;
            }
        });
        out
    }
}

fn check_conv<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<(ConvGeometry, usize)> {
    const OP: &str = "conv2d";
    let dims = input.dims4(OP)?;
    let (kh, kw, kc, cout) = kernel.dims4(OP)?;
    if kc != dims.3 {
        return Err(Error::shape(
            OP,
            format!("input has {} channels but kernel expects {kc}", dims.3),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(
                OP,
                format!("bias shape {:?} does not match {cout} output channels", b.shape()),
            ));
        }
    }
    let geom = ConvGeometry::new(OP, dims, kh, kw, stride, padding)?;
    Ok((geom, cout))
}

/// 2-D convolution of a `(B,H,W,Cin)` input with a `(kh,kw,Cin,Cout)` kernel.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let (g, cout) = check_conv(input, kernel, bias, stride, padding)?;
    let cols = g.im2col(input.data());
    let mut out = vec![T::zero(); g.rows() * cout];
    T::gemm(
        g.rows(),
        g.patch(),
        cout,
        &cols,
        false,
        kernel.data(),
        false,
        &mut out,
        false,
    );
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(cout) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    Tensor::new(vec![g.batch, g.out_h, g.out_w, cout], out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Tensor<T>,
}

/// Gradients of [`conv2d`] given the upstream gradient of its output.
///
/// `want_input` / `want_kernel` skip the corresponding GEMM when the caller
/// does not need it (bottom of the network, frozen kernel).
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor<T>,
    want_input: bool,
    want_kernel: bool,
) -> Result<ConvGrads<T>> {
    let (g, cout) = check_conv(input, kernel, None, stride, padding)?;
    let expected = [g.batch, g.out_h, g.out_w, cout];
    if grad_out.shape() != expected {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream gradient {:?}, expected {expected:?}", grad_out.shape()),
        ));
    }
    let dy = grad_out.data();
    let mut db = vec![T::zero(); cout];
    for row in dy.chunks_exact(cout) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    let kernel_grad = if want_kernel {
        let cols = g.im2col(input.data());
        let mut dk = vec![T::zero(); g.patch() * cout];
        T::gemm(g.patch(), g.rows(), cout, &cols, true, dy, false, &mut dk, false);
        Some(Tensor::new(kernel.shape().to_vec(), dk)?)
    } else {
        None
    };
    let input_grad = if want_input {
        let mut dcols = vec![T::zero(); g.rows() * g.patch()];
        T::gemm(
            g.rows(),
            cout,
            g.patch(),
            dy,
            false,
            kernel.data(),
            true,
            &mut dcols,
            false,
        );
        Some(Tensor::new(input.shape().to_vec(), g.col2im(&dcols))?)
    } else {
        None
    };
    Ok(ConvGrads {
        input: input_grad,
        kernel: kernel_grad,
        bias: Tensor::new(vec![cout], db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution, independent of im2col.
    fn conv_naive(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, padding: Padding) -> Tensor<f64> {
        let (b, h, w, c) = x.dims4("t").unwrap();
        let (kh, kw, _, co) = k.dims4("t").unwrap();
        let (oh, pt) = window_geometry("t", h, kh, stride, padding).unwrap();
        let (ow, pl) = window_geometry("t", w, kw, stride, padding).unwrap();
        let mut out = Tensor::zeros(vec![b, oh, ow, co]);
        for n in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for o in 0..co {
                        let mut acc = 0.0;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pt as isize;
                                let ix = (ox * stride + kx) as isize - pl as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                for ci in 0..c {
                                    acc += x.data()[((n * h + iy as usize) * w + ix as usize) * c + ci]
                                        * k.data()[((ky * kw + kx) * c + ci) * co + o];
                                }
                            }
                        }
                        out.data_mut()[((n * oh + oy) * ow + ox) * co + o] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        (0..n)
            .map(|i| (((i as u64 + 1) * 2654435761 + seed * 40503) % 1000) as f64 / 500.0 - 1.0)
            .collect()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let c = 3;
        let x = Tensor::<f32>::from_fn(vec![2, 4, 5, c], |i| i as f32 * 0.1 - 2.0);
        let k = Tensor::from_fn(vec![1, 1, c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
        let bias = Tensor::zeros(vec![c]);
        let y = conv2d(&x, &k, Some(&bias), 1, Padding::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn constant_input_all_ones_kernel() {
        let c = 0.7f32;
        let x = Tensor::full(vec![1, 5, 5, 1], c);
        let k = Tensor::full(vec![3, 3, 1, 1], 1.0);
        let y = conv2d(&x, &k, Some(&Tensor::zeros(vec![1])), 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3, 1]);
        for &v in y.data() {
            assert!((v - 9.0 * c).abs() < 1e-6);
        }
    }

    #[test]
    fn strided_same_padding_shape() {
        let x = Tensor::<f32>::zeros(vec![1, 6, 6, 2]);
        let k = Tensor::zeros(vec![3, 3, 2, 4]);
        let y = conv2d(&x, &k, None, 2, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3, 4]);
    }

    #[test]
    fn same_padding_puts_extra_at_bottom_right() {
        // 4 wide, window 3, stride 2: out 2, total pad 1 -> 0 before, 1 after.
        assert_eq!(window_geometry("t", 4, 3, 2, Padding::Same).unwrap(), (2, 0));
        // 5 wide, window 4, stride 1: total pad 3 -> 1 before, 2 after.
        assert_eq!(window_geometry("t", 5, 4, 1, Padding::Same).unwrap(), (5, 1));
    }

    #[test]
    fn errors_are_structured() {
        let x = Tensor::<f32>::zeros(vec![1, 4, 4, 2]);
        let k = Tensor::zeros(vec![3, 3, 3, 1]);
        let err = conv2d(&x, &k, None, 1, Padding::Same).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");
        assert!(err.to_string().contains("2 channels"));

        let k = Tensor::zeros(vec![5, 5, 2, 1]);
        let err = conv2d(&x, &k, None, 1, Padding::Valid).unwrap_err();
        assert!(matches!(err, Error::EmptyOutput { .. }));
    }

    #[test]
    fn matches_naive_convolution() {
        for (stride, padding, kh, kw) in [
            (1, Padding::Same, 3, 3),
            (2, Padding::Valid, 3, 3),
            (2, Padding::Same, 3, 3),
            (1, Padding::Same, 1, 7),
            (1, Padding::Same, 7, 1),
            (1, Padding::Valid, 1, 1),
        ] {
            let x = Tensor::new(vec![2, 7, 6, 3], pseudo(2 * 7 * 6 * 3, 1)).unwrap();
            let k = Tensor::new(vec![kh, kw, 3, 4], pseudo(kh * kw * 12, 2)).unwrap();
            let fast = conv2d(&x, &k, None, stride, padding).unwrap();
            let slow = conv_naive(&x, &k, stride, padding);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), dy> == <x, dx> for a linear map with zero bias.
        let x = Tensor::new(vec![1, 5, 5, 2], pseudo(50, 3)).unwrap();
        let k = Tensor::new(vec![3, 3, 2, 3], pseudo(54, 4)).unwrap();
        let y = conv2d(&x, &k, None, 2, Padding::Same).unwrap();
        let dy = Tensor::new(y.shape().to_vec(), pseudo(y.len(), 5)).unwrap();
        let g = conv2d_backward(&x, &k, 2, Padding::Same, &dy, true, true).unwrap();
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(g.input.as_ref().unwrap().data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let rhs_k: f64 = k
            .data()
            .iter()
            .zip(g.kernel.as_ref().unwrap().data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs_k).abs() < 1e-10);
    }
}
