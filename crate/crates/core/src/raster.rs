//! Planar image rasters, binary masks, and the fundus image record.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multi-channel real raster stored planar (channel-major, then row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Input(format!(
                "raster data length {} does not match {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> Self {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, self.height - 1 - y, x));
                }
            }
        }
        out
    }

    /// Square `size`×`size` crop whose center pixel sits at `(row, col)`;
    /// out-of-bounds samples are mirrored back into the image.
    pub fn crop_reflect(&self, row: usize, col: usize, size: usize) -> Raster {
        let mut out = Raster::zeros(self.channels, size, size);
        let top = row as isize - (size / 2) as isize;
        let left = col as isize - (size / 2) as isize;
        let cols: Vec<usize> = (0..size)
            .map(|dx| reflect_index(left + dx as isize, self.width))
            .collect();
        for c in 0..self.channels {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for dy in 0..size {
                let sy = reflect_index(top + dy as isize, self.height);
                let srow = &src[sy * self.width..(sy + 1) * self.width];
                let drow = &mut dst[dy * size..(dy + 1) * size];
                for (d, &sx) in drow.iter_mut().zip(&cols) {
                    *d = srow[sx];
                }
            }
        }
        out
    }

    /// Pads the bottom and right edges by reflection so both dimensions
    /// become multiples of `multiple`.
    pub fn pad_to_multiple(&self, multiple: usize) -> Raster {
        let h = self.height.div_ceil(multiple) * multiple;
        let w = self.width.div_ceil(multiple) * multiple;
        if h == self.height && w == self.width {
            return self.clone();
        }
        let mut out = Raster::zeros(self.channels, h, w);
        for c in 0..self.channels {
            for y in 0..h {
                let sy = reflect_index(y as isize, self.height);
                for x in 0..w {
                    let sx = reflect_index(x as isize, self.width);
                    out.set(c, y, x, self.get(c, sy, sx));
                }
            }
        }
        out
    }

    /// Top-left `height`×`width` window.
    pub fn crop_top_left(&self, height: usize, width: usize) -> Raster {
        let mut out = Raster::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for y in 0..height {
                for x in 0..width {
                    out.set(c, y, x, self.get(c, y, x));
                }
            }
        }
        out
    }
}

/// Mirror reflection without edge repetition (`-1 → 1`, `n → n-2`),
/// folded repeatedly for offsets larger than the image.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Binary raster; every value is 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Input(format!(
                "mask data length {} does not match {}x{}",
                data.len(),
                height,
                width
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Input("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// `(row, col)` of every positive pixel in row-major order.
    pub fn positive_pixels(&self) -> Vec<(usize, usize)> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    pub fn pad_to_multiple(&self, multiple: usize) -> Mask {
        let h = self.height.div_ceil(multiple) * multiple;
        let w = self.width.div_ceil(multiple) * multiple;
        let mut out = Mask::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let v = self.get(reflect_index(y as isize, self.height), reflect_index(x as isize, self.width));
                out.set(y, x, v == 1);
            }
        }
        out
    }

    /// Mask counterpart of [`Raster::crop_reflect`].
    pub fn crop_reflect(&self, row: usize, col: usize, size: usize) -> Mask {
        let top = row as isize - (size / 2) as isize;
        let left = col as isize - (size / 2) as isize;
        let mut out = Mask::zeros(size, size);
        for dy in 0..size {
            let sy = reflect_index(top + dy as isize, self.height);
            for dx in 0..size {
                let sx = reflect_index(left + dx as isize, self.width);
                out.data[dy * size + dx] = self.data[sy * self.width + sx];
            }
        }
        out
    }

    /// Number of 4-connected components of positive pixels.
    pub fn connected_components(&self) -> usize {
        let mut seen = vec![false; self.data.len()];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..self.data.len() {
            if self.data[start] == 0 || seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let (y, x) = (i / self.width, i % self.width);
                let mut visit = |ny: usize, nx: usize| {
                    let j = ny * self.width + nx;
                    if self.data[j] == 1 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if y > 0 {
                    visit(y - 1, x);
                }
                if y + 1 < self.height {
                    visit(y + 1, x);
                }
                if x > 0 {
                    visit(y, x - 1);
                }
                if x + 1 < self.width {
                    visit(y, x + 1);
                }
            }
        }
        count
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HealthLabel {
    Healthy,
    Lesion,
}

impl HealthLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            HealthLabel::Healthy => "healthy",
            HealthLabel::Lesion => "lesion",
        }
    }
}

impl std::str::FromStr for HealthLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "healthy" => Ok(HealthLabel::Healthy),
            "lesion" => Ok(HealthLabel::Lesion),
            other => Err(Error::Input(format!("unknown label `{other}`"))),
        }
    }
}

/// A color fundus photograph with optional microaneurysm annotation.
#[derive(Debug, Clone)]
pub struct FundusImage {
    pub id: String,
    pub pixels: Raster,
    pub mask: Option<Mask>,
    pub label: HealthLabel,
}

impl FundusImage {
    pub fn new(id: impl Into<String>, pixels: Raster, mask: Option<Mask>, label: HealthLabel) -> Result<Self> {
        let image = Self {
            id: id.into(),
            pixels,
            mask,
            label,
        };
        image.validate()?;
        Ok(image)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.is_empty() {
            return Err(Error::Input(format!("image `{}` is empty", self.id)));
        }
        if let Some(mask) = &self.mask {
            if mask.width() != self.pixels.width() || mask.height() != self.pixels.height() {
                return Err(Error::Input(format!(
                    "mask of `{}` is {}x{}, image is {}x{}",
                    self.id,
                    mask.height(),
                    mask.width(),
                    self.pixels.height(),
                    self.pixels.width()
                )));
            }
            if self.label == HealthLabel::Healthy && !mask.is_all_zero() {
                return Err(Error::Input(format!(
                    "healthy image `{}` carries a non-empty lesion mask",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        let got: Vec<usize> = (-3..8).map(|i| reflect_index(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect_index(-7, 3), 1);
        assert_eq!(reflect_index(5, 1), 0);
    }

    #[test]
    fn crop_reflect_keeps_center_and_shape() {
        let mut r = Raster::zeros(1, 10, 10);
        r.set(0, 0, 0, 5.0);
        let crop = r.crop_reflect(0, 0, 7);
        assert_eq!((crop.height(), crop.width()), (7, 7));
        assert_eq!(crop.get(0, 3, 3), 5.0);
        // patch larger than the image still works
        let big = r.crop_reflect(0, 0, 33);
        assert_eq!(big.get(0, 16, 16), 5.0);
    }

    #[test]
    fn healthy_image_rejects_nonempty_mask() {
        let mut m = Mask::zeros(4, 4);
        m.set(1, 1, true);
        let err = FundusImage::new("x", Raster::zeros(3, 4, 4), Some(m), HealthLabel::Healthy);
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn components_counted_with_4_connectivity() {
        let mut m = Mask::zeros(5, 5);
        m.set(0, 0, true);
        m.set(1, 1, true);
        m.set(3, 3, true);
        m.set(3, 4, true);
        assert_eq!(m.connected_components(), 3);
    }
}
