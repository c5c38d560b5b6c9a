use atlas_autodiff::{Axis, CustomOp, Tape, Tensor, Var};

use super::{Bound, RegNet, RegNetConfig};
use crate::error::{Error, Result};

pub const NCC_EPS: f64 = 1e-5;
pub const CE_CLAMP: f32 = 1e-6;

/// Zero-padded `window x window` box sums of one plane, with the number of
/// in-grid pixels per window.
fn box_sum(src: &[f64], h: usize, w: usize, half: usize, out: &mut [f64], tmp: &mut [f64]) {
    // Rows first, then columns, each as a running sum.
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        let mut acc = 0.0;
        let mut lo = 0usize;
        let mut hi = 0usize; // exclusive
        for x in 0..w {
            let want_hi = (x + half + 1).min(w);
            let want_lo = x.saturating_sub(half);
            while hi < want_hi {
                acc += row[hi];
                hi += 1;
            }
            while lo < want_lo {
                acc -= row[lo];
                lo += 1;
            }
            tmp[y * w + x] = acc;
        }
    }
    for x in 0..w {
        let mut acc = 0.0;
        let mut lo = 0usize;
        let mut hi = 0usize;
        for y in 0..h {
            let want_hi = (y + half + 1).min(h);
            let want_lo = y.saturating_sub(half);
            while hi < want_hi {
                acc += tmp[hi * w + x];
                hi += 1;
            }
            while lo < want_lo {
                acc -= tmp[lo * w + x];
                lo += 1;
            }
            out[y * w + x] = acc;
        }
    }
}

fn window_count(h: usize, w: usize, half: usize, x: usize, y: usize) -> f64 {
    let span = |p: usize, n: usize| ((p + half + 1).min(n) - p.saturating_sub(half)) as f64;
    span(x, w) * span(y, h)
}

/// Per-pixel window statistics of one plane pair.
struct Windows {
    n: Vec<f64>,
    si: Vec<f64>,
    sj: Vec<f64>,
    sii: Vec<f64>,
    sjj: Vec<f64>,
    sij: Vec<f64>,
}

impl Windows {
    fn compute(i: &[f32], j: &[f32], h: usize, w: usize, half: usize) -> Self {
        let len = h * w;
        let iv: Vec<f64> = i.iter().map(|&v| v as f64).collect();
        let jv: Vec<f64> = j.iter().map(|&v| v as f64).collect();
        let mut tmp = vec![0.0; len];
        let mut sum = |src: Vec<f64>| {
            let mut out = vec![0.0; len];
            box_sum(&src, h, w, half, &mut out, &mut tmp);
            out
        };
        let sii = sum(iv.iter().map(|v| v * v).collect());
        let sjj = sum(jv.iter().map(|v| v * v).collect());
        let sij = sum(iv.iter().zip(&jv).map(|(a, b)| a * b).collect());
        let si = sum(iv);
        let sj = sum(jv);
        let n = (0..len)
            .map(|p| window_count(h, w, half, p % w, p / w))
            .collect();
        Self {
            n,
            si,
            sj,
            sii,
            sjj,
            sij,
        }
    }

    /// `(cross, var_i, var_j)` at pixel `p`.
    #[inline]
    fn moments(&self, p: usize) -> (f64, f64, f64) {
        let n = self.n[p];
        let cross = self.sij[p] - self.si[p] * self.sj[p] / n;
        // Clamp rounding noise; a window variance is never negative.
        let vi = (self.sii[p] - self.si[p] * self.si[p] / n).max(0.0);
        let vj = (self.sjj[p] - self.sj[p] * self.sj[p] / n).max(0.0);
        (cross, vi, vj)
    }
}

fn check_pair(a: &Tensor, b: &Tensor, window: usize) -> Result<(usize, usize, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidShape(format!(
            "loss inputs differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (n, c, h, w) = a.dims4()?;
    if window % 2 == 0 || window > h || window > w {
        return Err(Error::InvalidShape(format!(
            "NCC window {window} must be odd and fit a {h}x{w} image"
        )));
    }
    Ok((n * c, h, w))
}

/// `1 - mean(local squared NCC)` computed directly, without a tape.
pub fn ncc_value(warped: &Tensor, fixed: &Tensor, window: usize) -> Result<f64> {
    let (planes, h, w) = check_pair(warped, fixed, window)?;
    let half = window / 2;
    let len = h * w;
    let mut total = 0.0;
    for k in 0..planes {
        let s = Windows::compute(
            &warped.data()[k * len..(k + 1) * len],
            &fixed.data()[k * len..(k + 1) * len],
            h,
            w,
            half,
        );
        for p in 0..len {
            let (cross, vi, vj) = s.moments(p);
            total += cross * cross / (vi * vj + NCC_EPS);
        }
    }
    Ok(1.0 - total / (planes * len) as f64)
}

struct NccOp {
    window: usize,
}

impl CustomOp for NccOp {
    fn name(&self) -> &'static str {
        "local_ncc"
    }

    fn backward(
        &self,
        grad_out: &Tensor,
        inputs: &[&Tensor],
        _output: &Tensor,
        needs_grad: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (i_t, j_t) = (inputs[0], inputs[1]);
        let (n, c, h, w) = i_t.dims4().expect("checked in forward");
        let planes = n * c;
        let len = h * w;
        let half = self.window / 2;
        let scale = -(grad_out.data()[0] as f64) / (planes * len) as f64;
        let mut gi = vec![0.0f32; planes * len];
        let mut gj = vec![0.0f32; planes * len];
        let mut tmp = vec![0.0; len];
        for k in 0..planes {
            let i = &i_t.data()[k * len..(k + 1) * len];
            let j = &j_t.data()[k * len..(k + 1) * len];
            let s = Windows::compute(i, j, h, w, half);
            // Derivatives of each pixel's cc with respect to its window sums.
            let mut a_i = vec![0.0; len];
            let mut a_j = vec![0.0; len];
            let mut a_ii = vec![0.0; len];
            let mut a_jj = vec![0.0; len];
            let mut a_ij = vec![0.0; len];
            for p in 0..len {
                let np = s.n[p];
                let (cross, vi, vj) = s.moments(p);
                let d = vi * vj + NCC_EPS;
                let d_cross = 2.0 * cross / d;
                let c2 = cross * cross / (d * d);
                let d_vi = -c2 * vj;
                let d_vj = -c2 * vi;
                a_ij[p] = d_cross;
                a_ii[p] = d_vi;
                a_jj[p] = d_vj;
                a_i[p] = -d_cross * s.sj[p] / np - 2.0 * d_vi * s.si[p] / np;
                a_j[p] = -d_cross * s.si[p] / np - 2.0 * d_vj * s.sj[p] / np;
            }
            // The box filter is symmetric, so its adjoint is itself.
            let mut boxed = |src: &[f64]| {
                let mut out = vec![0.0; len];
                box_sum(src, h, w, half, &mut out, &mut tmp);
                out
            };
            let b_ij = boxed(&a_ij);
            if needs_grad[0] {
                let b_i = boxed(&a_i);
                let b_ii = boxed(&a_ii);
                for q in 0..len {
                    let g = b_i[q] + 2.0 * i[q] as f64 * b_ii[q] + j[q] as f64 * b_ij[q];
                    gi[k * len + q] = (scale * g) as f32;
                }
            }
            if needs_grad[1] {
                let b_j = boxed(&a_j);
                let b_jj = boxed(&a_jj);
                for q in 0..len {
                    let g = b_j[q] + 2.0 * j[q] as f64 * b_jj[q] + i[q] as f64 * b_ij[q];
                    gj[k * len + q] = (scale * g) as f32;
                }
            }
        }
        let shape = i_t.shape();
        vec![
            needs_grad[0].then(|| Tensor::new(shape, gi).expect("same shape")),
            needs_grad[1].then(|| Tensor::new(shape, gj).expect("same shape")),
        ]
    }
}

/// Local normalised cross-correlation loss.
///
/// For every pixel, the squared correlation of the two images over the
/// `window x window` neighbourhood (clipped at the border, statistics over
/// the in-grid pixels only) is `cross^2 / (var_I * var_J + 1e-5)`; the loss
/// is one minus its mean. It lies in `[0, 1]` and 0 is a perfect match.
pub fn loss_ncc(tape: &mut Tape, warped: Var, fixed: Var, window: usize) -> Result<Var> {
    let value = ncc_value(tape.value(warped), tape.value(fixed), window)?;
    Ok(tape.custom(
        &[warped, fixed],
        Tensor::scalar(value as f32),
        Some(value),
        Box::new(NccOp { window }),
    ))
}

fn check_target(tape: &Tape, pred: Var, target: Var) -> Result<()> {
    if tape.value(pred).shape() != tape.value(target).shape() {
        return Err(Error::InvalidShape(format!(
            "prediction {:?} and target {:?} differ",
            tape.value(pred).shape(),
            tape.value(target).shape()
        )));
    }
    if let Some(bad) = tape
        .value(target)
        .data()
        .iter()
        .find(|&&t| t != 0.0 && t != 1.0)
    {
        return Err(Error::Contract(format!("target value {bad} is not 0 or 1")));
    }
    Ok(())
}

/// Mean binary cross-entropy of a soft prediction against a binary target.
pub fn loss_ce(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    check_target(tape, pred, target)?;
    let p = tape.clamp(pred, CE_CLAMP, 1.0 - CE_CLAMP);
    let log_p = tape.ln(p);
    let q = tape.scale(p, -1.0);
    let q = tape.offset(q, 1.0);
    let log_q = tape.ln(q);
    let t = target;
    let not_t = tape.scale(t, -1.0);
    let not_t = tape.offset(not_t, 1.0);
    let pos = tape.mul(t, log_p)?;
    let neg = tape.mul(not_t, log_q)?;
    let ll = tape.add(pos, neg)?;
    let m = tape.mean(ll);
    Ok(tape.scale(m, -1.0))
}

/// Below this a logit residual `sigmoid(z) - t` is treated as zero.
const RESIDUAL_FLOOR: f64 = 1e-12;

struct CeLogitsOp;

impl CustomOp for CeLogitsOp {
    fn name(&self) -> &'static str {
        "ce_logits"
    }

    fn backward(
        &self,
        grad_out: &Tensor,
        inputs: &[&Tensor],
        _output: &Tensor,
        needs_grad: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (z, t) = (inputs[0], inputs[1]);
        let scale = grad_out.data()[0] as f64 / z.numel() as f64;
        let g = needs_grad[0].then(|| {
            let data = z
                .data()
                .iter()
                .zip(t.data())
                .map(|(&zv, &tv)| {
                    let s = 1.0 / (1.0 + (-(zv as f64)).exp());
                    let r = s - tv as f64;
                    // Saturated residuals would only feed subnormals downstream.
                    if r.abs() < RESIDUAL_FLOOR {
                        0.0
                    } else {
                        (scale * r) as f32
                    }
                })
                .collect();
            Tensor::new(z.shape(), data).expect("same shape")
        });
        vec![g, None]
    }
}

/// Binary cross-entropy of `sigmoid(logits)` against a binary target,
/// evaluated from the logits so saturated predictions keep their gradient.
/// Agrees with [`loss_ce`] wherever the sigmoid stays inside its clamp.
pub fn loss_ce_logits(tape: &mut Tape, logits: Var, target: Var) -> Result<Var> {
    check_target(tape, logits, target)?;
    let (z, t) = (tape.value(logits), tape.value(target));
    let sum: f64 = z
        .data()
        .iter()
        .zip(t.data())
        .map(|(&zv, &tv)| {
            let (zv, tv) = (zv as f64, tv as f64);
            zv.max(0.0) - zv * tv + (-zv.abs()).exp().ln_1p()
        })
        .sum();
    let value = sum / z.numel() as f64;
    Ok(tape.custom(
        &[logits, target],
        Tensor::scalar(value as f32),
        Some(value),
        Box::new(CeLogitsOp),
    ))
}

/// `mean(dx^2) + mean(dy^2)` over forward differences of every component.
pub fn loss_smooth(tape: &mut Tape, flow: Var) -> Result<Var> {
    let (_, _, h, w) = tape.value(flow).dims4()?;
    if h < 2 || w < 2 {
        return Err(Error::InvalidShape(format!(
            "smoothness needs at least 2x2, got {h}x{w}"
        )));
    }
    let dx = tape.diff(flow, Axis::X)?;
    let dy = tape.diff(flow, Axis::Y)?;
    let dx2 = tape.mul(dx, dx)?;
    let dy2 = tape.mul(dy, dy)?;
    let mx = tape.mean(dx2);
    let my = tape.mean(dy2);
    Ok(tape.add(mx, my)?)
}

/// The three weighted terms of the registration loss and their sum.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub flow: Var,
    pub ncc: Var,
    pub ce: Var,
    pub smooth: Var,
    pub total: Var,
}

/// Registers prototype (moving) onto patient scan (fixed) and scores the
/// result: `ncc + ce_weight * ce + smooth_weight * smooth`.
#[allow(clippy::too_many_arguments)]
pub fn loss_reg(
    tape: &mut Tape,
    net: &RegNet,
    bound: &Bound,
    proto_scan: Var,
    proto_mask: Var,
    scan: Var,
    mask: Var,
    cfg: &RegNetConfig,
) -> Result<LossTerms> {
    let flow = net.forward(tape, bound, proto_scan, scan)?;
    let warped = tape.grid_sample(proto_scan, flow)?;
    let warped_mask = tape.grid_sample(proto_mask, flow)?;
    let ncc = loss_ncc(tape, warped, scan, cfg.ncc_window)?;
    let ce = loss_ce(tape, warped_mask, mask)?;
    let smooth = loss_smooth(tape, flow)?;
    let ce_w = tape.scale(ce, cfg.ce_weight);
    let sm_w = tape.scale(smooth, cfg.smooth_weight);
    let total = tape.add(ncc, ce_w)?;
    let total = tape.add(total, sm_w)?;
    Ok(LossTerms {
        flow,
        ncc,
        ce,
        smooth,
        total,
    })
}
