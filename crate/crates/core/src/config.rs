//! Run configuration, profiles, seed override and run manifests.
//!
//! A configuration file is TOML with one section per stage. Values given in
//! the file override the selected profile (the paper-scale defaults, or the
//! `tiny` desk-scale profile); unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::SynthConfig;
use crate::error::{Error, Result};
use crate::fusion::PipelineOptions;
use crate::hgn::{HgnArch, HgnTrainConfig};
use crate::prn::{PrnArch, PrnTrainConfig};

pub const SEED_ENV: &str = "LESIONSEG_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Gaussian σ is the image width divided by this.
    pub sigma_divisor: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { sigma_divisor: 30.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub fixed_threshold: f64,
    /// Maximum rows written to curve files.
    pub curve_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fixed_threshold: 0.5,
            curve_points: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub profile: String,
    pub preprocess: PreprocessConfig,
    pub synth: SynthConfig,
    pub hgn: HgnTrainConfig,
    pub prn: PrnTrainConfig,
    pub pipeline: PipelineOptions,
    pub evaluation: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            profile: "paper".into(),
            preprocess: PreprocessConfig::default(),
            synth: SynthConfig::default(),
            hgn: HgnTrainConfig::default(),
            prn: PrnTrainConfig::default(),
            pipeline: PipelineOptions::default(),
            evaluation: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale profile: small architectures, short epochs, larger
    /// learning rates.
    pub fn tiny() -> Self {
        let paper = Self::default();
        Self {
            profile: "tiny".into(),
            hgn: HgnTrainConfig {
                arch: HgnArch::tiny(),
                // the half-scale net is still trained faster, but 1e-2
                // leaves it dead on some seeds
                lr_full: 1e-3,
                lr_half: 3e-3,
                batch_size: 8,
                batches_per_epoch: 30,
                max_epochs: 16,
                patience: 6,
                patch_size: 64,
                ..paper.hgn
            },
            prn: PrnTrainConfig {
                arch: PrnArch {
                    patch_size: 33,
                    ..PrnArch::tiny()
                },
                lr: 1e-3,
                lr_decay_epoch: 8,
                batch_size: 16,
                batches_per_epoch: 40,
                max_epochs: 20,
                patience: 8,
                resample_period: 2,
                healthy_pool_size: 20_000,
                rescore_cap: 5_000,
                validation_patches: 600,
                ..paper.prn
            },
            ..paper
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::default()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected paper or tiny)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.hgn.validate()?;
        self.prn.validate()?;
        if !(self.preprocess.sigma_divisor > 0.0) {
            return Err(Error::Config("preprocess.sigma_divisor must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.pipeline.threshold) || !(0.0..=1.0).contains(&self.evaluation.fixed_threshold) {
            return Err(Error::Config("thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Parses TOML text on top of `base`.
    pub fn from_toml_over(base: &RunConfig, text: &str) -> Result<Self> {
        let overlay: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let mut merged = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, overlay);
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Resolves the configuration: profile defaults (the file's `profile`
    /// key, else `tiny` when requested, else paper), then the file, then the
    /// seed environment override.
    pub fn load(path: Option<&Path>, tiny: bool) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        let file_profile = toml::from_str::<toml::Table>(&text)
            .map_err(|e| Error::Config(e.message().to_string()))?
            .get("profile")
            .and_then(|v| v.as_str().map(str::to_string));
        let name = file_profile.unwrap_or_else(|| if tiny { "tiny".into() } else { "paper".into() });
        let mut cfg = Self::from_toml_over(&Self::profile(&name)?, &text)?;
        if tiny && name != "tiny" {
            return Err(Error::Config(format!("--tiny conflicts with profile `{name}` in the config file")));
        }
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(cfg)
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to reproduce a run: command, resolved configuration,
/// seed, code version and digests of every input file. No timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub threads: usize,
    pub config: RunConfig,
    pub inputs: Vec<InputDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, inputs: &[PathBuf]) -> Result<Self> {
        let mut digests = inputs
            .iter()
            .map(|p| {
                Ok(InputDigest {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        digests.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: config.seed,
            threads: crate::par::threads(),
            config: config.clone(),
            inputs: digests,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        crate::io::create_dir(dir)?;
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
