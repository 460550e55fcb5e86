//! Contrast enhancement and the two-level scale pyramid.
//!
//! Enhancement subtracts a Gaussian-blurred background from each channel:
//! `4·I − 4·(G_σ ∗ I) + 1024/30`. The same path runs at training and at
//! inference time. Enhancement is applied at full resolution and the half
//! scale is derived from the enhanced image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{reflect_index, FundusImage, Mask, Raster};

/// Additive offset of the enhancement formula.
pub const ENHANCE_OFFSET: f64 = 1024.0 / 30.0;
/// Upper bound of the enhanced value range fed to the networks.
pub const ENHANCE_RANGE: f64 = 1024.0;
/// Gaussian kernels are cut at this many standard deviations.
pub const KERNEL_TRUNCATE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scale {
    #[serde(rename = "1x")]
    Full,
    #[serde(rename = "0.5x")]
    Half,
}

impl Scale {
    pub fn factor(self) -> usize {
        match self {
            Scale::Full => 1,
            Scale::Half => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Full => "1x",
            Scale::Half => "0.5x",
        }
    }

    /// Short tag used in file names.
    pub fn file_tag(self) -> &'static str {
        match self {
            Scale::Full => "1x",
            Scale::Half => "05x",
        }
    }
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1x" | "1" | "full" => Ok(Scale::Full),
            "0.5x" | "05x" | "0.5" | "half" => Ok(Scale::Half),
            other => Err(Error::Input(format!("unknown scale `{other}`"))),
        }
    }
}

/// Normalized 1-D Gaussian taps, truncated at `KERNEL_TRUNCATE·σ`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (KERNEL_TRUNCATE * sigma).ceil().max(1.0) as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable Gaussian blur of one plane with mirrored borders.
pub fn gaussian_blur_plane(plane: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    let taps = gaussian_kernel(sigma);
    let radius = (taps.len() / 2) as isize;

    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let sx = reflect_index(x as isize + k as isize - radius, width);
                acc += t * row[sx];
            }
            tmp[y * width + x] = acc;
        }
    }

    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for (k, &t) in taps.iter().enumerate() {
            let sy = reflect_index(y as isize + k as isize - radius, height);
            let src = &tmp[sy * width..(sy + 1) * width];
            let dst = &mut out[y * width..(y + 1) * width];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += t * s;
            }
        }
    }
    out
}

/// Background-subtracting contrast enhancement, per channel.
pub fn enhance(image: &FundusImage, sigma: f64) -> Result<FundusImage> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("sigma must be positive, got {sigma}")));
    }
    if image.pixels.is_empty() {
        return Err(Error::Input(format!("image `{}` is empty", image.id)));
    }
    let (h, w) = (image.height(), image.width());
    let mut pixels = image.pixels.clone();
    for c in 0..pixels.channels() {
        let blurred = gaussian_blur_plane(image.pixels.plane(c), h, w, sigma);
        let src = image.pixels.plane(c);
        for ((o, &i), &g) in pixels.plane_mut(c).iter_mut().zip(src).zip(&blurred) {
            *o = 4.0 * i - 4.0 * g + ENHANCE_OFFSET;
        }
    }
    Ok(FundusImage {
        id: image.id.clone(),
        pixels,
        mask: image.mask.clone(),
        label: image.label,
    })
}

/// Default blur width: image width divided by `divisor`.
pub fn sigma_for(width: usize, divisor: f64) -> Result<f64> {
    if !(divisor > 0.0) {
        return Err(Error::Parameter(format!("sigma divisor must be positive, got {divisor}")));
    }
    Ok(width as f64 / divisor)
}

/// Clamps enhanced values to `[0, 1024]` and rescales to `[0, 1]`.
pub fn normalize_for_network(pixels: &Raster) -> Raster {
    let mut out = pixels.clone();
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = v.clamp(0.0, ENHANCE_RANGE) / ENHANCE_RANGE);
    out
}

/// Rows and columns appended (by reflection) to make dimensions even.
pub fn downsample_padding(height: usize, width: usize) -> (usize, usize) {
    (height % 2, width % 2)
}

/// Halves resolution: 2×2 area mean for pixels, 2×2 max for the mask.
/// Odd dimensions are first padded by one reflected row/column.
pub fn downsample_half(image: &FundusImage) -> Result<FundusImage> {
    if image.pixels.is_empty() {
        return Err(Error::Input(format!("image `{}` is empty", image.id)));
    }
    let src = image.pixels.pad_to_multiple(2);
    let (h, w) = (src.height() / 2, src.width() / 2);
    let mut pixels = Raster::zeros(src.channels(), h, w);
    for c in 0..src.channels() {
        for y in 0..h {
            for x in 0..w {
                let s = src.get(c, 2 * y, 2 * x)
                    + src.get(c, 2 * y, 2 * x + 1)
                    + src.get(c, 2 * y + 1, 2 * x)
                    + src.get(c, 2 * y + 1, 2 * x + 1);
                pixels.set(c, y, x, s / 4.0);
            }
        }
    }
    let mask = image.mask.as_ref().map(downsample_mask);
    Ok(FundusImage {
        id: image.id.clone(),
        pixels,
        mask,
        label: image.label,
    })
}

pub fn downsample_mask(mask: &Mask) -> Mask {
    let src = mask.pad_to_multiple(2);
    let (h, w) = (src.height() / 2, src.width() / 2);
    let mut out = Mask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let any = src.get(2 * y, 2 * x)
                | src.get(2 * y, 2 * x + 1)
                | src.get(2 * y + 1, 2 * x)
                | src.get(2 * y + 1, 2 * x + 1);
            out.set(y, x, any == 1);
        }
    }
    out
}

/// Enhancement followed by optional halving and network normalization:
/// the exact input both trainers and inference see.
pub fn prepare(image: &FundusImage, scale: Scale, sigma_divisor: f64) -> Result<FundusImage> {
    let sigma = sigma_for(image.width(), sigma_divisor)?;
    let enhanced = enhance(image, sigma)?;
    let mut scaled = match scale {
        Scale::Full => enhanced,
        Scale::Half => downsample_half(&enhanced)?,
    };
    scaled.pixels = normalize_for_network(&scaled.pixels);
    Ok(scaled)
}
