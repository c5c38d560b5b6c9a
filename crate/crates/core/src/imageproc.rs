//! Classical image operations: rigid resampling and alignment, intensity
//! normalisation and histograms.

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Rotation by `angle` radians about the image centre, followed by a
/// translation of `(tx, ty)` pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RigidTransform {
    pub angle: f64,
    pub tx: f64,
    pub ty: f64,
}

impl RigidTransform {
    pub const IDENTITY: Self = Self {
        angle: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn new(angle: f64, tx: f64, ty: f64) -> Self {
        Self { angle, tx, ty }
    }

    pub fn from_degrees(deg: f64, tx: f64, ty: f64) -> Self {
        Self::new(deg.to_radians(), tx, ty)
    }

    pub fn degrees(&self) -> f64 {
        self.angle.to_degrees()
    }

    pub fn inverse(&self) -> Self {
        let (s, c) = (-self.angle).sin_cos();
        Self {
            angle: -self.angle,
            tx: -(c * self.tx - s * self.ty),
            ty: -(s * self.tx + c * self.ty),
        }
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &Self) -> Self {
        let (s, c) = next.angle.sin_cos();
        Self {
            angle: self.angle + next.angle,
            tx: c * self.tx - s * self.ty + next.tx,
            ty: s * self.tx + c * self.ty + next.ty,
        }
    }

    /// Maps a point in the source frame to the destination frame.
    pub fn map_point(&self, x: f64, y: f64, center: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - center.0, y - center.1);
        (
            c * dx - s * dy + center.0 + self.tx,
            s * dx + c * dy + center.1 + self.ty,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Nearest,
    Bilinear,
}

fn center(g: &Grid) -> (f64, f64) {
    ((g.width() as f64 - 1.0) * 0.5, (g.height() as f64 - 1.0) * 0.5)
}

fn bilinear(g: &Grid, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (x0, y0) = (fx as isize, fy as isize);
    let (wx, wy) = (x - fx, y - fy);
    let at = |dx: isize, dy: isize| g.get_or_zero(x0 + dx, y0 + dy) as f64;
    let mut acc = (1.0 - wx) * (1.0 - wy) * at(0, 0);
    if wx != 0.0 {
        acc += wx * (1.0 - wy) * at(1, 0);
    }
    if wy != 0.0 {
        acc += (1.0 - wx) * wy * at(0, 1);
        if wx != 0.0 {
            acc += wx * wy * at(1, 1);
        }
    }
    acc
}

/// Resamples `image` under `t` by inverse mapping; samples outside read 0.
pub fn apply_rigid(image: &Grid, t: &RigidTransform, interp: Interp) -> Grid {
    let inv = t.inverse();
    let c = center(image);
    let (s, co) = inv.angle.sin_cos();
    Grid::from_fn(image.height(), image.width(), |x, y| {
        let (dx, dy) = (x as f64 - c.0, y as f64 - c.1);
        let sx = co * dx - s * dy + c.0 + inv.tx;
        let sy = s * dx + co * dy + c.1 + inv.ty;
        match interp {
            Interp::Nearest => image.get_or_zero(sx.round() as isize, sy.round() as isize),
            Interp::Bilinear => bilinear(image, sx, sy) as f32,
        }
    })
}

/// Pearson correlation of two equally sized grids over all pixels.
pub fn global_ncc(a: &Grid, b: &Grid) -> Result<f64> {
    a.same_dims(b)?;
    let stats = Moments::of(a.data().iter().map(|&v| v as f64).zip(b.data().iter().map(|&v| v as f64)));
    stats
        .correlation()
        .ok_or_else(|| Error::DegenerateInput("constant image has no correlation".into()))
}

#[derive(Default)]
struct Moments {
    n: f64,
    sa: f64,
    sb: f64,
    saa: f64,
    sbb: f64,
    sab: f64,
}

impl Moments {
    fn of(pairs: impl Iterator<Item = (f64, f64)>) -> Self {
        let mut m = Moments::default();
        for (a, b) in pairs {
            m.n += 1.0;
            m.sa += a;
            m.sb += b;
            m.saa += a * a;
            m.sbb += b * b;
            m.sab += a * b;
        }
        m
    }

    fn correlation(&self) -> Option<f64> {
        let va = self.saa - self.sa * self.sa / self.n;
        let vb = self.sbb - self.sb * self.sb / self.n;
        // Relative cut-off: rounding leaves tiny positive variances on constant input.
        let tiny = 1e-12 * (self.saa + self.sbb).max(1e-300);
        if va <= tiny || vb <= tiny {
            return None;
        }
        Some((self.sab - self.sa * self.sb / self.n) / (va * vb).sqrt())
    }
}

/// Scores candidate transforms of `moving` against a fixed image.
struct Scorer<'a> {
    moving: &'a Grid,
    fixed: &'a Grid,
    center: (f64, f64),
}

impl Scorer<'_> {
    fn score(&self, t: &RigidTransform) -> f64 {
        let inv = t.inverse();
        let (s, c) = inv.angle.sin_cos();
        let (w, h) = (self.fixed.width(), self.fixed.height());
        let fixed = self.fixed.data();
        let mut m = Moments::default();
        for y in 0..h {
            let dy = y as f64 - self.center.1;
            for x in 0..w {
                let dx = x as f64 - self.center.0;
                let sx = c * dx - s * dy + self.center.0 + inv.tx;
                let sy = s * dx + c * dy + self.center.1 + inv.ty;
                let a = bilinear(self.moving, sx, sy);
                let b = fixed[y * w + x] as f64;
                m.n += 1.0;
                m.sa += a;
                m.sb += b;
                m.saa += a * a;
                m.sbb += b * b;
                m.sab += a * b;
            }
        }
        m.correlation().unwrap_or(-1.0)
    }
}

fn tie_key(t: &RigidTransform) -> (f64, f64, f64) {
    (t.angle.abs(), t.tx.abs(), t.ty.abs())
}

fn better(score: f64, t: &RigidTransform, best_score: f64, best: &RigidTransform) -> bool {
    score > best_score || (score == best_score && tie_key(t) < tie_key(best))
}

fn steps(half_range: f64, step: f64) -> Vec<f64> {
    let n = (half_range / step).round() as i64;
    (-n..=n).map(|i| i as f64 * step).collect()
}

fn grid_search(
    scorer: &Scorer,
    around: RigidTransform,
    scale: f64,
    angles_deg: &[f64],
    shifts: &[f64],
) -> (RigidTransform, f64) {
    let mut best = around;
    let mut best_score = f64::NEG_INFINITY;
    for &da in angles_deg {
        for &dy in shifts {
            for &dx in shifts {
                let t = RigidTransform::new(
                    around.angle + da.to_radians(),
                    around.tx + dx / scale,
                    around.ty + dy / scale,
                );
                let score = scorer.score(&t);
                if better(score, &t, best_score, &best) {
                    best = t;
                    best_score = score;
                }
            }
        }
    }
    // Report full-resolution parameters.
    (
        RigidTransform::new(best.angle, best.tx * scale, best.ty * scale),
        best_score,
    )
}

/// Finds the rigid transform that best maps `moving` onto `fixed` under
/// global NCC.
///
/// A coarse search on 2x-downsampled images covers +-20 degrees and +-25% of
/// the width; two finer full-resolution passes follow, then a local
/// step-halving refinement. Ties go to the smallest `(|angle|, |tx|, |ty|)`.
pub fn rigid_align(moving: &Grid, fixed: &Grid) -> Result<RigidTransform> {
    moving.same_dims(fixed)?;
    for g in [moving, fixed] {
        let (lo, hi) = g.min_max();
        if lo == hi {
            return Err(Error::DegenerateInput(
                "cannot align a constant image".into(),
            ));
        }
    }

    let coarse_m = moving.downsample2();
    let coarse_f = fixed.downsample2();
    let coarse = Scorer {
        moving: &coarse_m,
        fixed: &coarse_f,
        center: center(&coarse_f),
    };
    let reach = (0.25 * fixed.width() as f64).floor();
    // Coarse translations are expressed in coarse pixels: 4 full-res px = 2.
    let (t0, _) = grid_search(
        &coarse,
        RigidTransform::IDENTITY,
        2.0,
        &steps(20.0, 2.0),
        &steps(reach / 2.0, 2.0),
    );

    let full = Scorer {
        moving,
        fixed,
        center: center(fixed),
    };
    let (t1, _) = grid_search(&full, t0, 1.0, &steps(2.0, 0.5), &steps(4.0, 1.0));
    let (mut best, mut best_score) =
        grid_search(&full, t1, 1.0, &steps(0.5, 0.25), &steps(1.0, 0.25));

    let (mut da, mut dt) = (0.125f64, 0.125f64);
    while dt >= 1.0 / 64.0 {
        let mut improved = false;
        for (a, x, y) in [
            (da, 0.0, 0.0),
            (-da, 0.0, 0.0),
            (0.0, dt, 0.0),
            (0.0, -dt, 0.0),
            (0.0, 0.0, dt),
            (0.0, 0.0, -dt),
        ] {
            let t = RigidTransform::new(best.angle + f64::to_radians(a), best.tx + x, best.ty + y);
            let score = full.score(&t);
            if score > best_score {
                best = t;
                best_score = score;
                improved = true;
            }
        }
        if !improved {
            da *= 0.5;
            dt *= 0.5;
        }
    }
    Ok(best)
}

/// Min-max rescale to `[0, 1]`; a constant image maps to zeros.
pub fn normalize_intensity(image: &Grid) -> Grid {
    let (lo, hi) = image.min_max();
    if hi <= lo {
        return image.map(|_| 0.0);
    }
    let (lo, span) = (lo as f64, hi as f64 - lo as f64);
    image.map(|v| ((v as f64 - lo) / span) as f32)
}

pub const HISTOGRAM_BINS: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Histogram {
    pub bins: [u64; HISTOGRAM_BINS],
    pub total: u64,
}

impl Histogram {
    /// Bin frequencies summing to 1.
    pub fn normalized(&self) -> [f64; HISTOGRAM_BINS] {
        let mut out = [0.0; HISTOGRAM_BINS];
        for (o, &b) in out.iter_mut().zip(&self.bins) {
            *o = b as f64 / self.total.max(1) as f64;
        }
        out
    }

    /// L1 distance between normalised histograms, in `[0, 2]`.
    pub fn l1_distance(&self, other: &Histogram) -> f64 {
        self.normalized()
            .iter()
            .zip(other.normalized())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    pub fn merge(&mut self, other: &Histogram) {
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            *a += b;
        }
        self.total += other.total;
    }
}

/// 64 uniform bins over `[0, 1]`; the last bin is closed on the right.
pub fn histogram64(image: &Grid) -> Result<Histogram> {
    let mut bins = [0u64; HISTOGRAM_BINS];
    for &v in image.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Contract(format!(
                "histogram value {v} outside [0, 1]"
            )));
        }
        let i = ((v as f64 * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        bins[i] += 1;
    }
    Ok(Histogram {
        bins,
        total: image.len() as u64,
    })
}
