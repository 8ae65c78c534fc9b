//! 2-d convolution kernels (zero padding, square kernels, equal strides).
//!
//! The production path lowers each sample to columns (im2col) and runs one
//! matrix multiply per sample. [`conv2d_direct`] is a plain nested-loop
//! reference used to cross-check it.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Resolved geometry of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (batch, in_channels, height, width) = match *input {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::Shape(format!("conv2d input must be N x C x H x W, got {input:?}"))),
        };
        let (out_channels, w_in, kh, kw) = match *weight {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => return Err(Error::Shape(format!("conv2d weight must be O x I x K x K, got {weight:?}"))),
        };
        if input.iter().chain(weight).any(|&d| d == 0) {
            return Err(Error::Shape("conv2d operands must not have zero-extent dims".into()));
        }
        if kh != kw {
            return Err(Error::Shape(format!("conv2d kernel must be square, got {kh}x{kw}")));
        }
        if w_in != in_channels {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {in_channels} channels, weight expects {w_in}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let kernel = kh;
        if kernel > height + 2 * padding || kernel > width + 2 * padding {
            return Err(Error::Shape(format!(
                "conv2d kernel {kernel} larger than padded input {}x{}",
                height + 2 * padding,
                width + 2 * padding
            )));
        }
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel,
            stride,
            padding,
            out_height: (height + 2 * padding - kernel) / stride + 1,
            out_width: (width + 2 * padding - kernel) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_height, self.out_width]
    }

    /// Rows of the column matrix: `C * K * K`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Columns of the column matrix: `H' * W'`.
    pub fn positions(&self) -> usize {
        self.out_height * self.out_width
    }

    fn sample_in(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn sample_out(&self) -> usize {
        self.out_channels * self.positions()
    }
}

/// Unfold one `C x H x W` sample into a `(C*K*K) x (H'*W')` row-major matrix.
pub fn im2col(sample: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let (k, p) = (g.kernel, g.positions());
    debug_assert_eq!(cols.len(), g.patch_len() * p);
    for c in 0..g.in_channels {
        let plane = &sample[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `C x H x W` sample.
pub fn col2im(cols: &[f64], g: &ConvGeometry, sample: &mut [f64]) {
    let (k, p) = (g.kernel, g.positions());
    for c in 0..g.in_channels {
        let plane = &mut sample[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_width + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Strided matrix operand: `(data, row_stride, col_stride)`.
type Operand<'a> = (&'a [f64], usize, usize);

/// `c = a * b + beta * c` for an `m x k` times `k x n` product, `c` row-major.
fn gemm(m: usize, k: usize, n: usize, a: Operand<'_>, b: Operand<'_>, beta: f64, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every operand slice covers the strided region addressed by the
    // given dimensions, which the callers derive from a validated geometry.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Scratch buffer reused across samples of one call.
pub(crate) struct ColumnBuffer(Vec<f64>);

impl ColumnBuffer {
    pub(crate) fn new(g: &ConvGeometry) -> Self {
        Self(vec![0.0; g.patch_len() * g.positions()])
    }
}

/// Convolve sample `x_n` with a `O x C x K x K` weight into `out_n` (`O x H' x W'`).
pub(crate) fn forward_sample(
    x_n: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeometry,
    cols: &mut ColumnBuffer,
    out_n: &mut [f64],
) {
    let (pl, p) = (g.patch_len(), g.positions());
    im2col(x_n, g, &mut cols.0);
    gemm(g.out_channels, pl, p, (weight, pl, 1), (&cols.0, p, 1), 0.0, out_n);
    if let Some(b) = bias {
        for (o, &bo) in b.iter().enumerate() {
            out_n[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += bo);
        }
    }
}

/// Backward of [`forward_sample`]. Accumulates into `grad_weight` when given,
/// and overwrites `grad_x_n` when given.
pub(crate) fn backward_sample(
    x_n: &[f64],
    weight: &[f64],
    grad_out_n: &[f64],
    g: &ConvGeometry,
    cols: &mut ColumnBuffer,
    grad_weight: Option<&mut [f64]>,
    grad_x_n: Option<&mut [f64]>,
) {
    let (pl, p) = (g.patch_len(), g.positions());
    if let Some(gw) = grad_weight {
        im2col(x_n, g, &mut cols.0);
        gemm(g.out_channels, p, pl, (grad_out_n, p, 1), (&cols.0, 1, p), 1.0, gw);
    }
    if let Some(gx) = grad_x_n {
        gemm(pl, g.out_channels, p, (weight, 1, pl), (grad_out_n, p, 1), 0.0, &mut cols.0);
        gx.fill(0.0);
        col2im(&cols.0, g, gx);
    }
}

fn check_bias(bias: Option<&Tensor>, g: &ConvGeometry) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [g.out_channels] {
            return Err(Error::Shape(format!("conv2d bias must have shape [{}], got {:?}", g.out_channels, b.shape())));
        }
    }
    Ok(())
}

/// Convolution via im2col and matrix multiplication.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    check_bias(bias, &g)?;
    let mut out = vec![0.0; g.batch * g.sample_out()];
    let mut cols = ColumnBuffer::new(&g);
    for n in 0..g.batch {
        forward_sample(
            &input.data()[n * g.sample_in()..(n + 1) * g.sample_in()],
            weight.data(),
            bias.map(Tensor::data),
            &g,
            &mut cols,
            &mut out[n * g.sample_out()..(n + 1) * g.sample_out()],
        );
    }
    Tensor::new(&g.output_shape(), out)
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
    need_input: bool,
    need_weight: bool,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    if grad_out.shape() != g.output_shape() {
        return Err(Error::Shape(format!(
            "conv2d upstream gradient shape {:?} != output shape {:?}",
            grad_out.shape(),
            g.output_shape()
        )));
    }
    let mut gw = need_weight.then(|| vec![0.0; weight.numel()]);
    let mut gx = need_input.then(|| vec![0.0; input.numel()]);
    let mut gb = vec![0.0; g.out_channels];
    let mut cols = ColumnBuffer::new(&g);
    let (si, so, p) = (g.sample_in(), g.sample_out(), g.positions());
    for n in 0..g.batch {
        let go = &grad_out.data()[n * so..(n + 1) * so];
        for (o, b) in gb.iter_mut().enumerate() {
            *b += go[o * p..(o + 1) * p].iter().sum::<f64>();
        }
        backward_sample(
            &input.data()[n * si..(n + 1) * si],
            weight.data(),
            go,
            &g,
            &mut cols,
            gw.as_deref_mut(),
            gx.as_mut().map(|v| &mut v[n * si..(n + 1) * si]),
        );
    }
    Ok(ConvGrads {
        input: gx.map(|d| Tensor::new(input.shape(), d)).transpose()?,
        weight: gw.map(|d| Tensor::new(weight.shape(), d)).transpose()?,
        bias: Tensor::new(&[g.out_channels], gb)?,
    })
}

/// Reference convolution by explicit loops over every output cell.
pub fn conv2d_direct(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    check_bias(bias, &g)?;
    let (x, w, k) = (input.data(), weight.data(), g.kernel);
    let mut out = vec![0.0; g.batch * g.sample_out()];
    let mut idx = 0;
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            for oy in 0..g.out_height {
                for ox in 0..g.out_width {
                    let mut acc = bias.map_or(0.0, |b| b.data()[o]);
                    for c in 0..g.in_channels {
                        for ky in 0..k {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= g.height as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= g.width as isize {
                                    continue;
                                }
                                let xi = ((n * g.in_channels + c) * g.height + iy as usize) * g.width + ix as usize;
                                let wi = ((o * g.in_channels + c) * k + ky) * k + kx;
                                acc += w[wi] * x[xi];
                            }
                        }
                    }
                    out[idx] = acc;
                    idx += 1;
                }
            }
        }
    }
    Tensor::new(&g.output_shape(), out)
}
