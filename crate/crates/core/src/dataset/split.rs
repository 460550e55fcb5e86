use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::raster::{FundusImage, HealthLabel, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub healthy: usize,
    pub lesion: usize,
}

/// Image ids per split. Validation images are only ever used for monitoring.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub train_counts: SplitCounts,
    pub validation_counts: SplitCounts,
    pub test_counts: SplitCounts,
}

impl DatasetSplit {
    pub fn ids(&self, split: SplitName) -> &[String] {
        match split {
            SplitName::Train => &self.train,
            SplitName::Validation => &self.validation,
            SplitName::Test => &self.test,
        }
    }

    pub fn is_disjoint(&self) -> bool {
        let mut seen = HashSet::new();
        self.train
            .iter()
            .chain(&self.validation)
            .chain(&self.test)
            .all(|id| seen.insert(id.as_str()))
    }
}

/// One row of the split manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    #[serde(default)]
    pub mask: Option<String>,
    pub label: HealthLabel,
    pub split: SplitName,
}

/// Comma-separated manifest with header `id,image,mask,label,split`; paths
/// are relative to the manifest's directory.
#[derive(Debug, Clone)]
pub struct SplitManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl SplitManifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self {
            root: root.into(),
            entries,
        };
        if !m.split().is_disjoint() {
            return Err(Error::Input("split manifest lists an image id more than once".into()));
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let entries = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()
            .map_err(|e| Error::format(path, e.to_string()))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(root, entries).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        for e in &self.entries {
            writer.serialize(e).map_err(|e| Error::format(path, e.to_string()))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }

    pub fn split(&self) -> DatasetSplit {
        let mut s = DatasetSplit::default();
        for e in &self.entries {
            let (ids, counts) = match e.split {
                SplitName::Train => (&mut s.train, &mut s.train_counts),
                SplitName::Validation => (&mut s.validation, &mut s.validation_counts),
                SplitName::Test => (&mut s.test, &mut s.test_counts),
            };
            ids.push(e.id.clone());
            match e.label {
                HealthLabel::Healthy => counts.healthy += 1,
                HealthLabel::Lesion => counts.lesion += 1,
            }
        }
        s
    }

    pub fn entries_in(&self, split: SplitName) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Loads raw (unenhanced) images of one split.
    pub fn load(&self, split: SplitName) -> Result<Vec<FundusImage>> {
        self.entries_in(split).map(|e| self.load_entry(e)).collect()
    }

    pub fn load_entry(&self, e: &ManifestEntry) -> Result<FundusImage> {
        let pixels = io::read_rgb(&self.root.join(&e.image))?;
        let mask = match &e.mask {
            Some(m) if !m.is_empty() => Some(io::read_mask(&self.root.join(m))?),
            _ => match e.label {
                HealthLabel::Healthy => Some(Mask::zeros(pixels.height(), pixels.width())),
                HealthLabel::Lesion => None,
            },
        };
        FundusImage::new(e.id.clone(), pixels, mask, e.label)
    }

    /// Paths of every file the manifest references, manifest-relative.
    pub fn referenced_files(&self) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in &self.entries {
            out.push(self.root.join(&e.image));
            if let Some(m) = e.mask.as_ref().filter(|m| !m.is_empty()) {
                out.push(self.root.join(m));
            }
        }
        out
    }
}
