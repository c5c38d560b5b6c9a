//! Single-channel 2-D images.

use atlas_autodiff::Tensor;

use crate::error::{Error, Result};

/// A row-major `height x width` image of `f32` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::InvalidShape(format!(
                "grid {height}x{width} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0, "empty grid");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Value at integer coordinates, 0 outside the grid.
    #[inline]
    pub fn get_or_zero(&self, x: isize, y: isize) -> f32 {
        if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
            0.0
        } else {
            self.data[y as usize * self.width + x as usize]
        }
    }

    /// Bilinear sample at real coordinates, reading 0 outside the grid.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f32 {
        let fx = x.floor();
        let fy = y.floor();
        let (x0, y0) = (fx as isize, fy as isize);
        let (wx, wy) = ((x - fx) as f32, (y - fy) as f32);
        let mut acc = (1.0 - wx) * (1.0 - wy) * self.get_or_zero(x0, y0);
        if wx != 0.0 {
            acc += wx * (1.0 - wy) * self.get_or_zero(x0 + 1, y0);
        }
        if wy != 0.0 {
            acc += (1.0 - wx) * wy * self.get_or_zero(x0, y0 + 1);
            if wx != 0.0 {
                acc += wx * wy * self.get_or_zero(x0 + 1, y0 + 1);
            }
        }
        acc
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_dims(&self, other: &Grid) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::InvalidShape(format!(
                "grids differ: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    /// Pixelwise mean of two grids of equal size.
    pub fn average(&self, other: &Grid) -> Result<Self> {
        self.same_dims(other)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| (a + b) * 0.5)
                .collect(),
        })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// `1.0` where the value is at least `threshold`, `0.0` elsewhere.
    pub fn threshold(&self, threshold: f32) -> Self {
        self.map(|v| if v >= threshold { 1.0 } else { 0.0 })
    }

    /// Averages 2x2 blocks; odd trailing rows/columns are dropped.
    pub fn downsample2(&self) -> Self {
        let (h, w) = (self.height / 2, self.width / 2);
        Self::from_fn(h.max(1), w.max(1), |x, y| {
            let (sx, sy) = (2 * x, 2 * y);
            let at = |dx: usize, dy: usize| {
                let xx = (sx + dx).min(self.width - 1);
                let yy = (sy + dy).min(self.height - 1);
                self.get(xx, yy)
            };
            (at(0, 0) + at(1, 0) + at(0, 1) + at(1, 1)) * 0.25
        })
    }

    /// Stacks grids of equal size into an `[N,1,H,W]` tensor.
    pub fn stack(grids: &[&Grid]) -> Result<Tensor> {
        let first = grids
            .first()
            .ok_or_else(|| Error::InvalidShape("cannot stack zero grids".into()))?;
        let mut data = Vec::with_capacity(grids.len() * first.len());
        for g in grids {
            first.same_dims(g)?;
            data.extend_from_slice(&g.data);
        }
        Ok(Tensor::new(
            &[grids.len(), 1, first.height, first.width],
            data,
        )?)
    }

    /// Splits an `[N,C,H,W]` tensor channel `c` back into `N` grids.
    pub fn unstack(t: &Tensor, channel: usize) -> Result<Vec<Grid>> {
        let (n, c, h, w) = t.dims4()?;
        if channel >= c {
            return Err(Error::InvalidShape(format!(
                "channel {channel} out of range for {c} channels"
            )));
        }
        Ok((0..n)
            .map(|b| {
                let off = (b * c + channel) * h * w;
                Grid {
                    height: h,
                    width: w,
                    data: t.data()[off..off + h * w].to_vec(),
                }
            })
            .collect())
    }
}
