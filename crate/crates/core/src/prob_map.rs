//! Per-pixel lesion probability rasters and the `PMAP1` file format.
//!
//! `PMAP1` layout, all little-endian:
//!
//! | bytes        | content                         |
//! |--------------|---------------------------------|
//! | 0..5         | ASCII `PMAP1`                   |
//! | 5..9         | width, `u32`                    |
//! | 9..13        | height, `u32`                   |
//! | 13..         | `height·width` `f32`, row-major |

use std::path::Path;

use crate::error::{Error, Result};
use crate::preprocess::Scale;

pub const PMAP_MAGIC: &[u8; 5] = b"PMAP1";

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub scale: Scale,
    pub source_id: String,
}

impl ProbabilityMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, scale: Scale, source_id: impl Into<String>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Input(format!(
                "probability map has {} values for {height}x{width}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("probability {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            values,
            scale,
            source_id: source_id.into(),
        })
    }

    pub fn filled(height: usize, width: usize, value: f64, scale: Scale, source_id: impl Into<String>) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
            scale,
            source_id: source_id.into(),
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn same_dims(&self, other: &ProbabilityMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + 4 * self.values.len());
        out.extend_from_slice(PMAP_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for &v in &self.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    /// Parses `PMAP1` bytes; the scale tag is not stored and defaults to 1x.
    pub fn from_bytes(bytes: &[u8], source_id: impl Into<String>) -> Result<Self> {
        if bytes.len() < 13 || &bytes[..5] != PMAP_MAGIC {
            return Err(Error::Input("not a PMAP1 stream".into()));
        }
        let width = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let height = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")) as usize;
        let body = &bytes[13..];
        if body.len() != 4 * width * height {
            return Err(Error::Input(format!(
                "PMAP1 body has {} bytes, expected {}",
                body.len(),
                4 * width * height
            )));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Self::new(height, width, values, Scale::Full, source_id)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::from_bytes(&bytes, id).map_err(|e| Error::format(path, e.to_string()))
    }
}
