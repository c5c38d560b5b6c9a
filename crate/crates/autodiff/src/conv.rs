//! 2-D cross-correlation via im2col and single-precision GEMM.

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &Tensor,
        kernel: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (n, c, h, w) = input.dims4()?;
        let (f, kc, kh, kw) = kernel.dims4()?;
        if kc != c {
            return Err(AutodiffError::Shape(format!(
                "conv2d: input has {c} channels but kernel expects {kc}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(AutodiffError::Shape(format!(
                "conv2d: kernel extents must be odd, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(AutodiffError::Shape("conv2d: stride must be >= 1".into()));
        }
        if bias.shape() != [f] {
            return Err(AutodiffError::Shape(format!(
                "conv2d: bias shape {:?} does not match {f} filters",
                bias.shape()
            )));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(AutodiffError::Shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (+{padding})"
            )));
        }
        let out_h = (h + 2 * padding - kh) / stride + 1;
        let out_w = (w + 2 * padding - kw) / stride + 1;
        Ok(Self {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output columns `ox` whose input column `ox * stride + j - padding` is in range.
fn valid_range(g: &ConvGeometry, j: usize) -> (usize, usize) {
    let lo = g.padding.saturating_sub(j).div_ceil(g.stride);
    // Largest ox with ox * stride + j < w + padding.
    let limit = g.w + g.padding;
    let hi = if limit > j {
        ((limit - j - 1) / g.stride + 1).min(g.out_w)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds one image `[C,H,W]` into a `[C*kh*kw, out_h*out_w]` matrix.
fn im2col(g: &ConvGeometry, image: &[f32], cols: &mut [f32]) {
    let p = g.positions();
    for c in 0..g.c {
        let plane = &image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(g, j);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + i) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let start = lo * g.stride + j - g.padding;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (k, out) in line[lo..hi].iter_mut().enumerate() {
                            *out = src[start + k * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Folds column gradients back onto one image, accumulating overlaps.
fn col2im(g: &ConvGeometry, cols: &[f32], image: &mut [f32]) {
    let p = g.positions();
    for c in 0..g.c {
        let plane = &mut image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(g, j);
                if lo >= hi {
                    continue;
                }
                let start = lo * g.stride + j - g.padding;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + i) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[start..start + hi - lo].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (k, &v) in line.iter().enumerate() {
                            dst[start + k * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_transposed: bool,
    b: &[f32],
    b_transposed: bool,
    beta: f32,
    c: &mut [f32],
) {
    // Row-major A is m x k; a transposed operand is stored k x m.
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices are large enough for the requested strides (checked above)
    // and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Returns the output and the unfolded input columns (kept for the backward pass).
pub(crate) fn forward(
    g: &ConvGeometry,
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
) -> (Tensor, Vec<f32>) {
    let rows = g.rows();
    let p = g.positions();
    let in_stride = g.c * g.h * g.w;
    let mut cols = vec![0.0f32; g.n * rows * p];
    let mut out = vec![0.0f32; g.n * g.f * p];
    for b in 0..g.n {
        let col = &mut cols[b * rows * p..(b + 1) * rows * p];
        im2col(g, &input.data()[b * in_stride..(b + 1) * in_stride], col);
        let dst = &mut out[b * g.f * p..(b + 1) * g.f * p];
        for (f, plane) in dst.chunks_mut(p).enumerate() {
            plane.fill(bias.data()[f]);
        }
        gemm(g.f, rows, p, kernel.data(), false, col, false, 1.0, dst);
    }
    let out = Tensor::new(&[g.n, g.f, g.out_h, g.out_w], out).expect("conv output shape");
    (out, cols)
}

/// Gradients with respect to input, kernel and bias.
pub(crate) fn backward(
    g: &ConvGeometry,
    grad_out: &Tensor,
    kernel: &Tensor,
    cols: &[f32],
    need_input: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let rows = g.rows();
    let p = g.positions();
    let in_stride = g.c * g.h * g.w;
    let go = grad_out.data();

    let mut gk = vec![0.0f32; g.f * rows];
    let mut gb = vec![0.0f64; g.f];
    let mut gi = need_input.then(|| vec![0.0f32; g.n * in_stride]);
    let mut dcols = vec![0.0f32; rows * p];
    for b in 0..g.n {
        let gout = &go[b * g.f * p..(b + 1) * g.f * p];
        let col = &cols[b * rows * p..(b + 1) * rows * p];
        // dK += dOut (F x P) * cols^T (P x rows)
        gemm(g.f, p, rows, gout, false, col, true, 1.0, &mut gk);
        for (f, plane) in gout.chunks(p).enumerate() {
            gb[f] += plane.iter().map(|&v| v as f64).sum::<f64>();
        }
        if let Some(gi) = gi.as_mut() {
            // dCols = K^T (rows x F) * dOut (F x P)
            gemm(rows, g.f, p, kernel.data(), true, gout, false, 0.0, &mut dcols);
            col2im(g, &dcols, &mut gi[b * in_stride..(b + 1) * in_stride]);
        }
    }
    let gi = gi.map(|v| Tensor::new(&[g.n, g.c, g.h, g.w], v).expect("input grad shape"));
    let gk = Tensor::new(&[g.f, g.c, g.kh, g.kw], gk).expect("kernel grad shape");
    let gb = Tensor::new(&[g.f], gb.into_iter().map(|v| v as f32).collect()).expect("bias");
    (gi, gk, gb)
}
