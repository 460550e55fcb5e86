//! Raster and mask file I/O.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::raster::{Mask, Raster};

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads an 8-bit color image as a `3×H×W` raster with values in `[0, 255]`.
pub fn read_rgb(path: &Path) -> Result<Raster> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut r = Raster::zeros(3, h, w);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            r.set(c, y as usize, x as usize, px[c] as f64);
        }
    }
    Ok(r)
}

/// Writes a `3×H×W` raster as 8-bit RGB, rounding and clamping to `[0, 255]`.
pub fn write_rgb(path: &Path, raster: &Raster) -> Result<()> {
    let (h, w) = (raster.height(), raster.width());
    let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| raster.get(c.min(raster.channels() - 1), y as usize, x as usize).round().clamp(0.0, 255.0) as u8;
        Rgb([px(0), px(1), px(2)])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Writes a raster in `[0, 1024]` as 16-bit RGB with 64 counts per unit.
pub fn write_rgb16(path: &Path, raster: &Raster) -> Result<()> {
    let (h, w) = (raster.height(), raster.width());
    let img: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (raster.get(c, y as usize, x as usize) * 64.0).round().clamp(0.0, 65535.0) as u16;
        Rgb([px(0), px(1), px(2)])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Reads a single-channel mask; any value above 127 is a lesion pixel.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| (p[0] > 127) as u8).collect();
    Mask::from_vec(h, w, data)
}

/// Writes a mask as 0/255 grayscale.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let img: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([mask.get(y as usize, x as usize) * 255])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
