//! Self-describing parameter archives and line-delimited training logs.
//!
//! Checkpoint layout: the magic `LSCKPT1\n`, a little-endian `u64` header
//! length, a JSON header (model kind, configuration, epoch, validation
//! metric, parameter names and shapes) and then every parameter value as
//! little-endian `f64` in header order. Identical inputs give identical
//! bytes.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LSCKPT1\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub format_version: u32,
    pub config: serde_json::Value,
    pub epoch: usize,
    pub metric: Option<f64>,
    pub params: Vec<ParamShape>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub values: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn new<C: Serialize>(kind: &str, config: &C, epoch: usize, metric: Option<f64>, store: &ParamStore) -> Result<Self> {
        let config = serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            header: CheckpointHeader {
                kind: kind.into(),
                format_version: 1,
                config,
                epoch,
                metric,
                params: store
                    .params()
                    .iter()
                    .map(|p| ParamShape {
                        name: p.name.clone(),
                        dims: p.dims.clone(),
                    })
                    .collect(),
            },
            values: store.params().iter().map(|p| p.data.clone()).collect(),
        })
    }

    /// Decodes the stored configuration into a concrete type.
    pub fn config<C: serde::de::DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_value(self.header.config.clone()).map_err(|e| Error::Config(format!("checkpoint config: {e}")))
    }

    /// Copies stored values into a store built with the same layout.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.values.len() {
            return Err(Error::Input(format!(
                "checkpoint has {} parameters, model has {}",
                self.values.len(),
                store.len()
            )));
        }
        for ((p, shape), values) in store.params_mut().iter_mut().zip(&self.header.params).zip(&self.values) {
            if p.name != shape.name || p.dims != shape.dims {
                return Err(Error::Input(format!(
                    "checkpoint parameter `{}` {:?} does not match model `{}` {:?}",
                    shape.name, shape.dims, p.name, p.dims
                )));
            }
            p.data.copy_from_slice(values);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let n: usize = self.values.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * n);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.values.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err("not a checkpoint file".into());
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or("truncated header")?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| format!("bad header: {e}"))?;
        let mut data = &bytes[16 + hlen..];
        let mut values = Vec::with_capacity(header.params.len());
        for p in &header.params {
            let n: usize = p.dims.iter().product();
            if data.len() < 8 * n {
                return Err(format!("truncated data for `{}`", p.name));
            }
            values.push(
                data[..8 * n]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            );
            data = &data[8 * n..];
        }
        if !data.is_empty() {
            return Err(format!("{} trailing bytes", data.len()));
        }
        Ok(Self { header, values })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|d| Error::format(path, d))
    }

    /// Reads a checkpoint and checks its model kind.
    pub fn read_kind(path: &Path, kind: &str) -> Result<Self> {
        let ck = Self::read(path)?;
        if ck.header.kind != kind {
            return Err(Error::format(path, format!("expected a {kind} checkpoint, found {}", ck.header.kind)));
        }
        Ok(ck)
    }
}

/// One record of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss over the epoch's mini-batches.
    pub loss: f64,
    /// Mean of each loss component, by name.
    pub components: std::collections::BTreeMap<String, f64>,
    pub val_pr_auc: Option<f64>,
}

/// Appends records as one JSON object per line.
pub struct TrainLog {
    file: std::io::BufWriter<std::fs::File>,
    path: std::path::PathBuf,
}

impl TrainLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file: std::io::BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, record: &EpochRecord) -> Result<()> {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(self.file, "{line}")
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn read(path: &Path) -> Result<Vec<EpochRecord>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
            .collect()
    }
}

/// Tracks the best validation metric; signals a stop after `patience`
/// epochs without improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Returns true when `metric` is a new best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}
