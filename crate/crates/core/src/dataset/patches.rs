use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::preprocess::Scale;
use crate::raster::{FundusImage, HealthLabel, Raster};

pub const HGN_PATCH: usize = 256;
pub const PRN_PATCH: usize = 129;

/// A square crop around a labelled center pixel.
#[derive(Debug, Clone)]
pub struct PatchSample {
    pub pixels: Raster,
    pub center: (usize, usize),
    pub scale: Scale,
    pub label: HealthLabel,
    pub source_id: String,
}

/// Deterministic per-image random stream: seeded from `sha256(seed ‖ id)`,
/// so results do not depend on the order in which images are processed.
pub fn stream_rng(base_seed: u64, id: &str) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut h = Sha256::new();
    h.update(base_seed.to_le_bytes());
    h.update(id.as_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    rand_chacha::ChaCha8Rng::from_seed(seed)
}

#[derive(Debug, Clone, Copy)]
pub struct PatchRequest {
    pub kind: HealthLabel,
    pub size: usize,
    pub scale: Scale,
    pub count: usize,
    /// Allow healthy (negative) centers drawn from the background of lesion images.
    pub lesion_image_negatives: bool,
}

/// Candidate center pixels of one image for a given patch kind.
pub fn candidate_centers(image: &FundusImage, kind: HealthLabel, lesion_image_negatives: bool) -> Result<Vec<(usize, usize)>> {
    match (kind, image.label) {
        (HealthLabel::Lesion, HealthLabel::Healthy) => Err(Error::Usage(format!(
            "lesion patches requested from healthy image `{}`",
            image.id
        ))),
        (HealthLabel::Lesion, HealthLabel::Lesion) => {
            let mask = image
                .mask
                .as_ref()
                .ok_or_else(|| Error::Usage(format!("lesion image `{}` has no mask", image.id)))?;
            let centers = mask.positive_pixels();
            if centers.is_empty() {
                return Err(Error::Usage(format!("lesion image `{}` has an empty mask", image.id)));
            }
            Ok(centers)
        }
        (HealthLabel::Healthy, HealthLabel::Healthy) => {
            let (h, w) = (image.height(), image.width());
            Ok((0..h * w).map(|i| (i / w, i % w)).collect())
        }
        (HealthLabel::Healthy, HealthLabel::Lesion) => {
            if !lesion_image_negatives {
                return Err(Error::Usage(format!(
                    "healthy patches are drawn from healthy images only; `{}` is a lesion image",
                    image.id
                )));
            }
            let (h, w) = (image.height(), image.width());
            let mask = image.mask.as_ref();
            Ok((0..h * w)
                .map(|i| (i / w, i % w))
                .filter(|&(y, x)| mask.map_or(true, |m| m.get(y, x) == 0))
                .collect())
        }
    }
}

/// Draws `count` centers uniformly (with replacement) and crops reflected patches.
pub fn extract_patches(image: &FundusImage, request: &PatchRequest, seed: u64) -> Result<Vec<PatchSample>> {
    let centers = candidate_centers(image, request.kind, request.lesion_image_negatives)?;
    let mut rng = stream_rng(seed, &image.id);
    Ok((0..request.count)
        .map(|_| {
            let center = centers[rng.random_range(0..centers.len())];
            PatchSample {
                pixels: image.pixels.crop_reflect(center.0, center.1, request.size),
                center,
                scale: request.scale,
                label: request.kind,
                source_id: image.id.clone(),
            }
        })
        .collect())
}

/// Hypothesis-network training patches (256×256) at the image's scale.
pub fn extract_hgn_patches(image: &FundusImage, scale: Scale, kind: HealthLabel, count: usize, seed: u64) -> Result<Vec<PatchSample>> {
    extract_patches(
        image,
        &PatchRequest {
            kind,
            size: HGN_PATCH,
            scale,
            count,
            lesion_image_negatives: false,
        },
        seed,
    )
}

/// Refinement-network patches (129×129), always at full scale.
pub fn extract_prn_patches(image: &FundusImage, kind: HealthLabel, count: usize, seed: u64) -> Result<Vec<PatchSample>> {
    extract_patches(
        image,
        &PatchRequest {
            kind,
            size: PRN_PATCH,
            scale: Scale::Full,
            count,
            lesion_image_negatives: false,
        },
        seed,
    )
}

/// A center reference into an image collection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CenterRef {
    pub image: u32,
    pub row: u32,
    pub col: u32,
}

/// Precomputed center lists for one split at one scale. Mini-batches draw
/// from these with replacement instead of materializing every crop.
#[derive(Debug, Clone)]
pub struct CenterIndex {
    pub lesion: Vec<CenterRef>,
    /// Images eligible for negative centers, with their pixel counts.
    healthy_images: Vec<(u32, usize)>,
    healthy_total: usize,
    lesion_image_negatives: bool,
}

impl CenterIndex {
    pub fn build(images: &[FundusImage], lesion_image_negatives: bool) -> Result<Self> {
        let mut lesion = Vec::new();
        let mut healthy_images = Vec::new();
        for (i, image) in images.iter().enumerate() {
            match image.label {
                HealthLabel::Lesion => {
                    if let Some(mask) = &image.mask {
                        lesion.extend(mask.positive_pixels().into_iter().map(|(r, c)| CenterRef {
                            image: i as u32,
                            row: r as u32,
                            col: c as u32,
                        }));
                    }
                    if lesion_image_negatives {
                        healthy_images.push((i as u32, image.height() * image.width()));
                    }
                }
                HealthLabel::Healthy => healthy_images.push((i as u32, image.height() * image.width())),
            }
        }
        let healthy_total = healthy_images.iter().map(|(_, n)| n).sum();
        Ok(Self {
            lesion,
            healthy_images,
            healthy_total,
            lesion_image_negatives,
        })
    }

    pub fn healthy_candidates(&self) -> usize {
        self.healthy_total
    }

    pub fn sample_lesion<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<CenterRef> {
        if self.lesion.is_empty() {
            return Err(Error::Usage("no lesion centers in pool".into()));
        }
        Ok(self.lesion[rng.random_range(0..self.lesion.len())])
    }

    /// Uniform over all eligible negative pixels (area-weighted across images).
    pub fn sample_healthy<R: Rng + ?Sized>(&self, images: &[FundusImage], rng: &mut R) -> Result<CenterRef> {
        if self.healthy_total == 0 {
            return Err(Error::Usage("no healthy centers in pool".into()));
        }
        loop {
            let mut k = rng.random_range(0..self.healthy_total);
            let mut chosen = self.healthy_images[0];
            for &(img, n) in &self.healthy_images {
                if k < n {
                    chosen = (img, n);
                    break;
                }
                k -= n;
            }
            let image = &images[chosen.0 as usize];
            let (row, col) = (k / image.width(), k % image.width());
            let positive = image.mask.as_ref().is_some_and(|m| m.get(row, col) == 1);
            if positive && self.lesion_image_negatives {
                continue;
            }
            return Ok(CenterRef {
                image: chosen.0,
                row: row as u32,
                col: col as u32,
            });
        }
    }
}

/// Crops the patch a center reference points at.
pub fn crop(images: &[FundusImage], c: CenterRef, size: usize) -> Raster {
    images[c.image as usize]
        .pixels
        .crop_reflect(c.row as usize, c.col as usize, size)
}
