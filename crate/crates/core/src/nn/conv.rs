//! 2-D convolution (cross-correlation, stride 1, zero padding).
//!
//! The production path unrolls each batch item with im2col and runs a single
//! GEMM per item. The direct nested-loop version is kept alongside it as the
//! reference the fast path is tested against.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor4};

/// Filter bank of `K` kernels of size `F x F` over `C_in` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// Shape `(K, C_in, F, F)`.
    pub weights: Tensor4,
    /// One bias per filter.
    pub bias: Vec<f64>,
}

/// Gradients of a convolution with respect to its weights, bias and input.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub weights: Tensor4,
    pub bias: Vec<f64>,
    pub input: Tensor4,
}

/// Which forward implementation to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvPath {
    /// Direct quadruple loop.
    Naive,
    /// im2col followed by GEMM.
    Im2col,
}

impl ConvParams {
    /// All-zero filters and bias.
    pub fn zeros(filters: usize, in_channels: usize, kernel: usize) -> Result<Self> {
        Self::check_dims(filters, in_channels, kernel)?;
        Ok(ConvParams {
            weights: Tensor4::zeros(Shape::new(filters, in_channels, kernel, kernel)?)?,
            bias: vec![0.0; filters],
        })
    }

    /// He-normal weights with std `sqrt(2 / (C_in * F * F))`, zero bias.
    pub fn he_normal(filters: usize, in_channels: usize, kernel: usize, rng: &mut Rng) -> Result<Self> {
        Self::check_dims(filters, in_channels, kernel)?;
        let std = (2.0 / (in_channels * kernel * kernel) as f64).sqrt();
        let shape = Shape::new(filters, in_channels, kernel, kernel)?;
        let weights = Tensor4::from_fn(shape, |_, _, _, _| std * rng.gaussian())?;
        Ok(ConvParams { weights, bias: vec![0.0; filters] })
    }

    /// Wraps existing weights, checking the kernel is square and odd.
    pub fn new(weights: Tensor4, bias: Vec<f64>) -> Result<Self> {
        let s = weights.shape();
        if s.h != s.w {
            return Err(Error::InvalidSpec(format!("kernel must be square, got {}x{}", s.h, s.w)));
        }
        Self::check_dims(s.n, s.c, s.h)?;
        if bias.len() != s.n {
            return Err(Error::InvalidSpec(format!("{} filters but {} biases", s.n, bias.len())));
        }
        Ok(ConvParams { weights, bias })
    }

    fn check_dims(filters: usize, in_channels: usize, kernel: usize) -> Result<()> {
        if filters == 0 || in_channels == 0 {
            return Err(Error::InvalidSpec("filter and channel counts must be at least 1".into()));
        }
        if kernel.is_multiple_of(2) {
            return Err(Error::InvalidSpec(format!("kernel size must be odd, got {kernel}")));
        }
        Ok(())
    }

    pub fn filters(&self) -> usize {
        self.weights.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape().c
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape().h
    }

    /// Padding that keeps the spatial size unchanged.
    pub fn same_pad(&self) -> usize {
        (self.kernel() - 1) / 2
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    f: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(x: &Tensor4, p: &ConvParams, pad: usize) -> Result<Self> {
        let s = x.shape();
        if s.c != p.in_channels() {
            return Err(Error::ChannelMismatch { expected: p.in_channels(), got: s.c });
        }
        let f = p.kernel();
        if f > s.h + 2 * pad || f > s.w + 2 * pad {
            return Err(Error::KernelTooLarge { kernel: f, h: s.h, w: s.w, pad });
        }
        Ok(Geometry {
            n: s.n,
            cin: s.c,
            h: s.h,
            w: s.w,
            k: p.filters(),
            f,
            pad,
            oh: s.h + 2 * pad - f + 1,
            ow: s.w + 2 * pad - f + 1,
        })
    }

    fn out_shape(&self) -> Shape {
        Shape { n: self.n, c: self.k, h: self.oh, w: self.ow }
    }

    fn col_rows(&self) -> usize {
        self.cin * self.f * self.f
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Input coordinate for output position `o` and kernel offset `d`, or
    /// `None` when it falls in the zero padding.
    #[inline]
    fn source(o: usize, d: usize, pad: usize, len: usize) -> Option<usize> {
        (o + d).checked_sub(pad).filter(|&i| i < len)
    }

    fn im2col(&self, item: &[f64], col: &mut [f64]) {
        let cols = self.col_cols();
        let mut row = 0;
        for c in 0..self.cin {
            let plane = &item[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.f {
                for kx in 0..self.f {
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.oh {
                        let out_row = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        match Self::source(oy, ky, self.pad, self.h) {
                            None => out_row.fill(0.0),
                            Some(iy) => {
                                for (ox, v) in out_row.iter_mut().enumerate() {
                                    *v = match Self::source(ox, kx, self.pad, self.w) {
                                        Some(ix) => plane[iy * self.w + ix],
                                        None => 0.0,
                                    };
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], item: &mut [f64]) {
        let cols = self.col_cols();
        let mut row = 0;
        for c in 0..self.cin {
            let plane = &mut item[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.f {
                for kx in 0..self.f {
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.oh {
                        let Some(iy) = Self::source(oy, ky, self.pad, self.h) else { continue };
                        for ox in 0..self.ow {
                            if let Some(ix) = Self::source(ox, kx, self.pad, self.w) {
                                plane[iy * self.w + ix] += src[oy * self.ow + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Row-major `c = alpha * op(a) * op(b) + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers size `a` as m*k, `b` as k*n and `c` as m*n under the
    // given strides; matrixmultiply only reads/writes inside those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Convolution forward pass via im2col + GEMM.
pub fn conv2d_forward(x: &Tensor4, p: &ConvParams, pad: usize) -> Result<Tensor4> {
    conv2d_forward_with(ConvPath::Im2col, x, p, pad)
}

pub fn conv2d_forward_with(path: ConvPath, x: &Tensor4, p: &ConvParams, pad: usize) -> Result<Tensor4> {
    match path {
        ConvPath::Naive => conv2d_forward_naive(x, p, pad),
        ConvPath::Im2col => conv2d_forward_im2col(x, p, pad),
    }
}

fn conv2d_forward_im2col(x: &Tensor4, p: &ConvParams, pad: usize) -> Result<Tensor4> {
    let g = Geometry::new(x, p, pad)?;
    let mut out = Tensor4::zeros(g.out_shape())?;
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = vec![0.0; rows * cols];
    for n in 0..g.n {
        g.im2col(x.item(n), &mut col);
        let dst = out.item_mut(n);
        for (k, plane) in dst.chunks_exact_mut(cols).enumerate() {
            plane.fill(p.bias[k]);
        }
        gemm(g.k, rows, cols, p.weights.data(), (rows as isize, 1), &col, (cols as isize, 1), 1.0, dst);
    }
    Ok(out)
}

/// Direct convolution: for each output pixel, the windowed dot product over
/// the zero-padded input plus the filter bias.
pub fn conv2d_forward_naive(x: &Tensor4, p: &ConvParams, pad: usize) -> Result<Tensor4> {
    let g = Geometry::new(x, p, pad)?;
    let mut out = Tensor4::zeros(g.out_shape())?;
    for n in 0..g.n {
        for k in 0..g.k {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = p.bias[k];
                    for c in 0..g.cin {
                        for ky in 0..g.f {
                            let Some(iy) = Geometry::source(oy, ky, pad, g.h) else { continue };
                            for kx in 0..g.f {
                                if let Some(ix) = Geometry::source(ox, kx, pad, g.w) {
                                    acc += p.weights.get(k, c, ky, kx) * x.get(n, c, iy, ix);
                                }
                            }
                        }
                    }
                    out.set(n, k, oy, ox, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass: weight, bias and input gradients given the upstream
/// gradient `grad_out` of the forward output.
pub fn conv2d_backward(x: &Tensor4, p: &ConvParams, pad: usize, grad_out: &Tensor4) -> Result<ConvGrads> {
    let g = Geometry::new(x, p, pad)?;
    if grad_out.shape() != g.out_shape() {
        return Err(Error::ShapeMismatch { left: g.out_shape().dims(), right: grad_out.shape().dims() });
    }
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut gw = Tensor4::zeros(p.weights.shape())?;
    let mut gb = vec![0.0; g.k];
    let mut gx = Tensor4::zeros(x.shape())?;
    let mut col = vec![0.0; rows * cols];
    let mut dcol = vec![0.0; rows * cols];
    for n in 0..g.n {
        let dy = grad_out.item(n);
        for (k, plane) in dy.chunks_exact(cols).enumerate() {
            gb[k] += plane.iter().sum::<f64>();
        }
        // dW += dY (K x HW) * col^T (HW x CFF)
        g.im2col(x.item(n), &mut col);
        gemm(g.k, cols, rows, dy, (cols as isize, 1), &col, (1, cols as isize), 1.0, gw.data_mut());
        // dcol = W^T (CFF x K) * dY (K x HW)
        gemm(rows, g.k, cols, p.weights.data(), (1, rows as isize), dy, (cols as isize, 1), 0.0, &mut dcol);
        g.col2im(&dcol, gx.item_mut(n));
    }
    Ok(ConvGrads { weights: gw, bias: gb, input: gx })
}
