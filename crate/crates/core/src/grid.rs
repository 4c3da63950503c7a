//! Dense row-major grids for images, features, and depth maps.
//!
//! Pixel `(x, y)` has its center at integer coordinates, origin at the top-left
//! pixel, `x` to the right and `y` downward. Multi-channel grids interleave
//! channels: index `(y * width + x) * channels + c`.

use crate::error::{Error, Result};

/// An `H × W × C` grid of scalars. Used for images and feature maps alike.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::shape(format!(
                "{}x{}x{} grid needs {} values, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds a grid by evaluating `f(x, y, c)` at every entry.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn ensure_same_shape(&self, other: &ImageGrid, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    /// Single-channel luminance. Three-channel grids use Rec. 601 weights;
    /// other channel counts are averaged.
    pub fn luminance(&self) -> ImageGrid {
        if self.channels == 1 {
            return self.clone();
        }
        let mut out = ImageGrid::new(self.width, self.height, 1);
        for (o, px) in out.data.iter_mut().zip(self.data.chunks_exact(self.channels)) {
            *o = if self.channels == 3 {
                0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
            } else {
                px.iter().sum::<f64>() / self.channels as f64
            };
        }
        out
    }

    /// Area-average downsampling by an integer factor. Dimensions must divide evenly.
    pub fn downsample(&self, factor: usize) -> Result<ImageGrid> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::domain(format!(
                "{}x{} image is not divisible by {factor}",
                self.width, self.height
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = ImageGrid::new(w, h, self.channels);
        for y in 0..h {
            for x in 0..w {
                for c in 0..self.channels {
                    let mut acc = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += self.get(x * factor + dx, y * factor + dy, c);
                        }
                    }
                    out.set(x, y, c, acc * norm);
                }
            }
        }
        Ok(out)
    }

    /// Bilinear sample at a continuous coordinate. Returns `None` outside the
    /// closed rectangle `[0, W-1] × [0, H-1]`; at the far edges the 4-neighborhood
    /// is clamped.
    pub fn sample_bilinear(&self, x: f64, y: f64, out: &mut [f64]) -> bool {
        if !(x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64)
        {
            out.iter_mut().for_each(|v| *v = 0.0);
            return false;
        }
        let x0 = (x.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (y.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        for (c, o) in out.iter_mut().enumerate() {
            let v00 = self.get(x0, y0, c);
            let v10 = self.get(x1, y0, c);
            let v01 = self.get(x0, y1, c);
            let v11 = self.get(x1, y1, c);
            *o = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11);
        }
        true
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-pixel depth with a validity mask. Unmasked entries hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
}

impl DepthMap {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![0.0; width * height],
            mask: vec![false; width * height],
        }
    }

    /// Constant depth, fully valid.
    pub fn constant(width: usize, height: usize, depth: f64) -> Self {
        Self {
            width,
            height,
            depth: vec![depth; width * height],
            mask: vec![true; width * height],
        }
    }

    pub fn from_parts(width: usize, height: usize, depth: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if depth.len() != width * height || mask.len() != width * height {
            return Err(Error::shape(format!(
                "{width}x{height} depth map needs {} entries",
                width * height
            )));
        }
        let mut map = Self {
            width,
            height,
            depth,
            mask,
        };
        map.zero_unmasked();
        Ok(map)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Option<f64>) -> Self {
        let mut map = Self::empty(width, height);
        for y in 0..height {
            for x in 0..width {
                if let Some(d) = f(x, y) {
                    map.depth[y * width + x] = d;
                    map.mask[y * width + x] = true;
                }
            }
        }
        map
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.mask[i].then(|| self.depth[i])
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn zero_unmasked(&mut self) {
        for (d, &m) in self.depth.iter_mut().zip(&self.mask) {
            if !m {
                *d = 0.0;
            }
        }
    }

    /// Mean absolute difference over pixels valid in both maps. `None` when
    /// they share no valid pixel.
    pub fn masked_mae(&self, other: &DepthMap) -> Option<f64> {
        assert_eq!((self.width, self.height), (other.width, other.height));
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in 0..self.depth.len() {
            if self.mask[i] && other.mask[i] {
                sum += (self.depth[i] - other.depth[i]).abs();
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    /// Masked area-average downsampling; a coarse pixel is valid when any of
    /// its fine pixels is.
    pub fn downsample(&self, factor: usize) -> Result<DepthMap> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::domain(format!(
                "{}x{} depth map is not divisible by {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        Ok(DepthMap::from_fn(w, h, |x, y| {
            let mut acc = 0.0;
            let mut n = 0usize;
            for dy in 0..factor {
                for dx in 0..factor {
                    if let Some(d) = self.get(x * factor + dx, y * factor + dy) {
                        acc += d;
                        n += 1;
                    }
                }
            }
            (n > 0).then(|| acc / n as f64)
        }))
    }

    /// Nearest-neighbor upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> DepthMap {
        let (w, h) = (self.width * factor, self.height * factor);
        DepthMap::from_fn(w, h, |x, y| self.get(x / factor, y / factor))
    }
}

/// Nearest-neighbor upsampling of a single-channel scalar field.
pub(crate) fn upsample_nearest_scalar(values: &[f64], width: usize, height: usize, factor: usize) -> Vec<f64> {
    let (w, h) = (width * factor, height * factor);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            out.push(values[(y / factor) * width + x / factor]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_averages_blocks() {
        let img = ImageGrid::from_fn(4, 2, 1, |x, y, _| (x + 4 * y) as f64);
        let d = img.downsample(2).unwrap();
        assert_eq!((d.width, d.height), (2, 1));
        assert_eq!(d.data, vec![2.5, 4.5]);
        assert!(img.downsample(3).is_err());
    }

    #[test]
    fn bilinear_sample_edges() {
        let img = ImageGrid::from_fn(3, 2, 1, |x, y, _| (x + 10 * y) as f64);
        let mut v = [0.0];
        assert!(img.sample_bilinear(2.0, 1.0, &mut v));
        assert_eq!(v[0], 12.0);
        assert!(img.sample_bilinear(0.5, 0.5, &mut v));
        assert!((v[0] - 5.5).abs() < 1e-12);
        assert!(!img.sample_bilinear(-0.01, 0.0, &mut v));
        assert_eq!(v[0], 0.0);
    }

    #[test]
    fn depth_map_zeroes_unmasked_entries() {
        let d = DepthMap::from_parts(2, 1, vec![3.0, 4.0], vec![true, false]).unwrap();
        assert_eq!(d.depth, vec![3.0, 0.0]);
        assert_eq!(d.get(1, 0), None);
        let up = d.upsample_nearest(2);
        assert_eq!(up.valid_count(), 4);
    }
}
