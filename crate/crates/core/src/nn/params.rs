use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    /// He-normal with the given fan-in, scaled by `gain`.
    He { fan_in: usize, gain: f64 },
}

/// Flat, ordered parameter collection. Order is creation order and is part
/// of the checkpoint format.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng + ?Sized>(&mut self, name: impl Into<String>, dims: &[usize], init: Init, rng: &mut R) -> ParamId {
        let n: usize = dims.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::He { fan_in, gain } => {
                let std = gain * (2.0 / fan_in.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        z * std
                    })
                    .collect()
            }
        };
        self.params.push(Param {
            name: name.into(),
            dims: dims.to_vec(),
            data,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].data
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Replaces all values from another store with identical layout.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Input(format!(
                "parameter count mismatch: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.dims != src.dims {
                return Err(Error::Input(format!(
                    "parameter layout mismatch at `{}` {:?} vs `{}` {:?}",
                    dst.name, dst.dims, src.name, src.dims
                )));
            }
            dst.data.copy_from_slice(&src.data);
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            data: self.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub data: Vec<Vec<f64>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0]
    }

    pub fn accumulate(&mut self, other: &Grads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    /// Sums a list of gradients in list order.
    pub fn sum(store: &ParamStore, parts: &[Grads]) -> Grads {
        let mut total = store.zero_grads();
        for g in parts {
            total.accumulate(g);
        }
        total
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().flatten().for_each(|v| *v *= s);
    }
}
