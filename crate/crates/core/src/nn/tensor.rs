use crate::error::{Error, Result};
use crate::raster::Raster;

/// Dense `C×H×W` activation, row-major within each channel plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Input(format!(
                "tensor data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// A `D×1×1` tensor holding a flat vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            channels: data.len(),
            height: 1,
            width: 1,
            data,
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }
}

impl From<Raster> for Tensor {
    fn from(r: Raster) -> Self {
        let (c, h, w) = (r.channels(), r.height(), r.width());
        Tensor {
            channels: c,
            height: h,
            width: w,
            data: r.into_vec(),
        }
    }
}

impl From<&Raster> for Tensor {
    fn from(r: &Raster) -> Self {
        Tensor {
            channels: r.channels(),
            height: r.height(),
            width: r.width(),
            data: r.data().to_vec(),
        }
    }
}
