//! Bilinear resampling of an image through a dense displacement field.
//!
//! Channel 0 of the flow is the x (column) displacement and channel 1 the y
//! (row) displacement, both in pixels. Samples that fall outside the grid read 0.

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

pub(crate) fn check(image: &Tensor, flow: &Tensor) -> Result<()> {
    let (n, _, h, w) = image.dims4()?;
    let (fn_, fc, fh, fw) = flow.dims4()?;
    if fn_ != n || fc != 2 || fh != h || fw != w {
        return Err(AutodiffError::Shape(format!(
            "grid_sample: flow {:?} incompatible with image {:?}",
            flow.shape(),
            image.shape()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy)]
struct Corners {
    x0: isize,
    y0: isize,
    wx: f32,
    wy: f32,
}

#[inline]
fn corners(x: usize, y: usize, dx: f32, dy: f32) -> Corners {
    let sx = x as f32 + dx;
    let sy = y as f32 + dy;
    let fx = sx.floor();
    let fy = sy.floor();
    Corners {
        x0: fx as isize,
        y0: fy as isize,
        wx: sx - fx,
        wy: sy - fy,
    }
}

#[inline]
fn fetch(plane: &[f32], h: usize, w: usize, x: isize, y: isize) -> f32 {
    if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
        0.0
    } else {
        plane[y as usize * w + x as usize]
    }
}

pub(crate) fn forward(image: &Tensor, flow: &Tensor) -> Tensor {
    let (n, c, h, w) = image.dims4().expect("checked");
    let hw = h * w;
    let mut out = vec![0.0f32; image.numel()];
    for b in 0..n {
        let fx = &flow.data()[(b * 2) * hw..(b * 2 + 1) * hw];
        let fy = &flow.data()[(b * 2 + 1) * hw..(b * 2 + 2) * hw];
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let plane = &image.data()[off..off + hw];
            let dst = &mut out[off..off + hw];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let k = corners(x, y, fx[i], fy[i]);
                    // Zero-weight corners are skipped so a zero flow reproduces the input bit for bit.
                    let mut acc = (1.0 - k.wx) * (1.0 - k.wy) * fetch(plane, h, w, k.x0, k.y0);
                    if k.wx != 0.0 {
                        acc += k.wx * (1.0 - k.wy) * fetch(plane, h, w, k.x0 + 1, k.y0);
                    }
                    if k.wy != 0.0 {
                        acc += (1.0 - k.wx) * k.wy * fetch(plane, h, w, k.x0, k.y0 + 1);
                        if k.wx != 0.0 {
                            acc += k.wx * k.wy * fetch(plane, h, w, k.x0 + 1, k.y0 + 1);
                        }
                    }
                    dst[i] = acc;
                }
            }
        }
    }
    Tensor::new(image.shape(), out).expect("same shape")
}

/// Returns gradients with respect to the image and to the flow.
pub(crate) fn backward(
    image: &Tensor,
    flow: &Tensor,
    grad_out: &Tensor,
    need_image: bool,
    need_flow: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (n, c, h, w) = image.dims4().expect("checked");
    let hw = h * w;
    let mut gi = need_image.then(|| vec![0.0f32; image.numel()]);
    let mut gf = need_flow.then(|| vec![0.0f32; flow.numel()]);
    for b in 0..n {
        let fx = &flow.data()[(b * 2) * hw..(b * 2 + 1) * hw];
        let fy = &flow.data()[(b * 2 + 1) * hw..(b * 2 + 2) * hw];
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let plane = &image.data()[off..off + hw];
            let go = &grad_out.data()[off..off + hw];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let g = go[i];
                    if g == 0.0 {
                        continue;
                    }
                    let k = corners(x, y, fx[i], fy[i]);
                    if let Some(gi) = gi.as_mut() {
                        let weights = [
                            (0, 0, (1.0 - k.wx) * (1.0 - k.wy)),
                            (1, 0, k.wx * (1.0 - k.wy)),
                            (0, 1, (1.0 - k.wx) * k.wy),
                            (1, 1, k.wx * k.wy),
                        ];
                        for (ox, oy, wgt) in weights {
                            let (cx, cy) = (k.x0 + ox, k.y0 + oy);
                            if cx >= 0 && cy >= 0 && cx < w as isize && cy < h as isize {
                                gi[off + cy as usize * w + cx as usize] += g * wgt;
                            }
                        }
                    }
                    if let Some(gf) = gf.as_mut() {
                        let v00 = fetch(plane, h, w, k.x0, k.y0);
                        let v10 = fetch(plane, h, w, k.x0 + 1, k.y0);
                        let v01 = fetch(plane, h, w, k.x0, k.y0 + 1);
                        let v11 = fetch(plane, h, w, k.x0 + 1, k.y0 + 1);
                        let dsx = (1.0 - k.wy) * (v10 - v00) + k.wy * (v11 - v01);
                        let dsy = (1.0 - k.wx) * (v01 - v00) + k.wx * (v11 - v10);
                        gf[(b * 2) * hw + i] += g * dsx;
                        gf[(b * 2 + 1) * hw + i] += g * dsy;
                    }
                }
            }
        }
    }
    (
        gi.map(|v| Tensor::new(image.shape(), v).expect("shape")),
        gf.map(|v| Tensor::new(flow.shape(), v).expect("shape")),
    )
}
