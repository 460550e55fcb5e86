//! Patch extraction, split bookkeeping and the synthetic dataset generator.

mod patches;
mod split;
mod synth;

pub use patches::{
    candidate_centers, crop, extract_hgn_patches, extract_patches, extract_prn_patches, stream_rng, CenterIndex,
    CenterRef, PatchRequest, PatchSample, HGN_PATCH, PRN_PATCH,
};
pub use split::{DatasetSplit, ManifestEntry, SplitCounts, SplitManifest, SplitName};
pub use synth::{generate_synthetic, SynthConfig, SyntheticDataset};
