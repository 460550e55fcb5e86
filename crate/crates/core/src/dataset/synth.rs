//! Deterministic synthetic fundus-like images for desk-scale experiments.
//!
//! Lesion images carry small dark round blobs (the only annotated class) on a
//! textured background with dark curvilinear vessels, larger dark
//! hemorrhage-like blobs and bright exudate-like spots, all left out of the
//! mask. Mimics are unannotated dark blobs of lesion size and contrast that
//! sit on a vessel, beside an exudate or just off a hemorrhage edge, so only
//! their surroundings tell them apart from lesions. Healthy images carry the
//! distractors and mimics only.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::patches::stream_rng;
use super::split::{DatasetSplit, ManifestEntry, SplitManifest, SplitName};
use crate::error::{Error, Result};
use crate::io;
use crate::par;
use crate::raster::{FundusImage, HealthLabel, Mask, Raster};

/// Per-channel share of a darkening applied to the green channel.
const CHANNEL_GAIN: [f64; 3] = [0.7, 1.0, 0.5];
/// Same for brightening (yellowish exudates).
const BRIGHT_GAIN: [f64; 3] = [1.0, 1.0, 0.4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    pub train_healthy: usize,
    pub train_lesion: usize,
    pub validation_healthy: usize,
    pub validation_lesion: usize,
    pub test_healthy: usize,
    pub test_lesion: usize,
    pub lesions_per_image: usize,
    pub lesion_radius: [f64; 2],
    pub lesion_depth: [f64; 2],
    pub vessels_per_image: usize,
    pub vessel_width: [f64; 2],
    pub vessel_depth: [f64; 2],
    pub hemorrhages_per_image: usize,
    pub hemorrhage_radius: [f64; 2],
    pub hemorrhage_depth: [f64; 2],
    pub exudates_per_image: usize,
    pub exudate_radius: [f64; 2],
    pub exudate_brightness: [f64; 2],
    /// Lesion-sized dark blobs attached to a vessel, exudate or hemorrhage.
    pub mimics_per_image: usize,
    /// Upper bound on lesion radius; also the lower bound on hemorrhage radius.
    pub small_object_bound: f64,
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            train_healthy: 30,
            train_lesion: 30,
            validation_healthy: 5,
            validation_lesion: 5,
            test_healthy: 10,
            test_lesion: 10,
            lesions_per_image: 8,
            lesion_radius: [2.0, 6.0],
            lesion_depth: [7.0, 11.0],
            vessels_per_image: 4,
            vessel_width: [1.5, 3.5],
            vessel_depth: [7.0, 11.0],
            hemorrhages_per_image: 3,
            hemorrhage_radius: [9.0, 14.0],
            hemorrhage_depth: [7.0, 11.0],
            exudates_per_image: 2,
            exudate_radius: [2.5, 4.5],
            exudate_brightness: [10.0, 16.0],
            mimics_per_image: 6,
            small_object_bound: 8.0,
            noise_std: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, r: [f64; 2]| {
            if r[0] > r[1] || r[0] < 0.0 || !r[0].is_finite() || !r[1].is_finite() {
                Err(Error::Config(format!("synth.{name} must be an ordered non-negative range, got {r:?}")))
            } else {
                Ok(())
            }
        };
        ordered("lesion_radius", self.lesion_radius)?;
        ordered("lesion_depth", self.lesion_depth)?;
        ordered("vessel_width", self.vessel_width)?;
        ordered("vessel_depth", self.vessel_depth)?;
        ordered("hemorrhage_radius", self.hemorrhage_radius)?;
        ordered("hemorrhage_depth", self.hemorrhage_depth)?;
        ordered("exudate_radius", self.exudate_radius)?;
        ordered("exudate_brightness", self.exudate_brightness)?;
        if self.lesion_radius[0] <= 0.0 {
            return Err(Error::Config("synth.lesion_radius must be positive".into()));
        }
        if self.lesion_radius[1] >= self.small_object_bound {
            return Err(Error::Config(format!(
                "synth.lesion_radius max {} must stay below the small-object bound {}",
                self.lesion_radius[1], self.small_object_bound
            )));
        }
        if self.hemorrhage_radius[0] < self.small_object_bound {
            return Err(Error::Config(format!(
                "synth.hemorrhage_radius min {} must be at least the small-object bound {}",
                self.hemorrhage_radius[0], self.small_object_bound
            )));
        }
        if self.image_size < 4 * (self.lesion_radius[1] as usize + 4) {
            return Err(Error::Config(format!("synth.image_size {} is too small", self.image_size)));
        }
        if self.lesions_per_image == 0 && self.train_lesion + self.validation_lesion + self.test_lesion > 0 {
            return Err(Error::Config("synth.lesions_per_image must be positive".into()));
        }
        Ok(())
    }

    fn plan(&self) -> Vec<(String, HealthLabel, SplitName)> {
        let mut out = Vec::new();
        for (split, healthy, lesion) in [
            (SplitName::Train, self.train_healthy, self.train_lesion),
            (SplitName::Validation, self.validation_healthy, self.validation_lesion),
            (SplitName::Test, self.test_healthy, self.test_lesion),
        ] {
            for i in 0..healthy {
                out.push((format!("{}_healthy_{i:03}", split.as_str()), HealthLabel::Healthy, split));
            }
            for i in 0..lesion {
                out.push((format!("{}_lesion_{i:03}", split.as_str()), HealthLabel::Lesion, split));
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub images: Vec<FundusImage>,
    pub entries: Vec<ManifestEntry>,
    pub split: DatasetSplit,
}

impl SyntheticDataset {
    pub fn images_in(&self, split: SplitName) -> Vec<FundusImage> {
        self.entries
            .iter()
            .zip(&self.images)
            .filter(|(e, _)| e.split == split)
            .map(|(_, img)| img.clone())
            .collect()
    }

    /// Writes `images/`, `masks/` and `split.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<SplitManifest> {
        io::create_dir(&dir.join("images"))?;
        io::create_dir(&dir.join("masks"))?;
        for (e, img) in self.entries.iter().zip(&self.images) {
            io::write_rgb(&dir.join(&e.image), &img.pixels)?;
            if let (Some(m), Some(mask)) = (&e.mask, &img.mask) {
                io::write_mask(&dir.join(m), mask)?;
            }
        }
        let manifest = SplitManifest::new(dir, self.entries.clone())?;
        manifest.write(&dir.join("split.csv"))?;
        Ok(manifest)
    }
}

/// Generates the full dataset; identical `(config, seed)` give bit-identical output.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<SyntheticDataset> {
    config.validate()?;
    let plan = config.plan();
    let images = par::map(&plan, |(id, label, _)| render_image(config, seed, id, *label))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let entries: Vec<ManifestEntry> = plan
        .iter()
        .map(|(id, label, split)| ManifestEntry {
            id: id.clone(),
            image: format!("images/{id}.png"),
            mask: Some(format!("masks/{id}.png")),
            label: *label,
            split: *split,
        })
        .collect();
    let split = SplitManifest::new(".", entries.clone())?.split();
    Ok(SyntheticDataset { images, entries, split })
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Max-combines `profile` into `layer` around `(cy, cx)`.
fn stamp_layer(layer: &mut [f64], size: usize, cy: f64, cx: f64, reach: f64, profile: impl Fn(f64, f64) -> f64) {
    let n = size as isize;
    let y0 = ((cy - reach).floor() as isize).max(0);
    let y1 = ((cy + reach).ceil() as isize).min(n - 1);
    let x0 = ((cx - reach).floor() as isize).max(0);
    let x1 = ((cx + reach).ceil() as isize).min(n - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let v = profile(y as f64 - cy, x as f64 - cx);
            let i = y as usize * size + x as usize;
            if v > layer[i] {
                layer[i] = v;
            }
        }
    }
}

struct Canvas {
    size: usize,
    /// Darkening in green-channel gray levels, combined by max.
    dark: Vec<f64>,
    bright: Vec<f64>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Self {
            size,
            dark: vec![0.0; size * size],
            bright: vec![0.0; size * size],
        }
    }

    fn stamp(&mut self, cy: f64, cx: f64, reach: f64, profile: impl Fn(f64, f64) -> f64) {
        stamp_layer(&mut self.dark, self.size, cy, cx, reach, profile);
    }

    fn brighten(&mut self, cy: f64, cx: f64, reach: f64, profile: impl Fn(f64, f64) -> f64) {
        stamp_layer(&mut self.bright, self.size, cy, cx, reach, profile);
    }

    fn disk(&mut self, cy: f64, cx: f64, r: f64, depth: f64) {
        self.stamp(cy, cx, r, |dy, dx| if (dy * dy + dx * dx).sqrt() <= r { depth } else { 0.0 });
    }

    fn is_clear(&self, cy: f64, cx: f64, radius: f64) -> bool {
        let n = self.size as isize;
        let r = radius.ceil() as isize;
        for dy in -r..=r {
            for dx in -r..=r {
                if (dy * dy + dx * dx) as f64 > radius * radius {
                    continue;
                }
                let (y, x) = (cy as isize + dy, cx as isize + dx);
                if y < 0 || x < 0 || y >= n || x >= n {
                    continue;
                }
                let i = y as usize * self.size + x as usize;
                if self.dark[i] > 0.0 || self.bright[i] > 0.0 {
                    return false;
                }
            }
        }
        true
    }
}

fn render_image(config: &SynthConfig, seed: u64, id: &str, label: HealthLabel) -> Result<FundusImage> {
    let n = config.image_size;
    let mut rng = stream_rng(seed, id);
    let mut canvas = Canvas::new(n);

    let vessels: Vec<Vec<(f64, f64)>> = (0..config.vessels_per_image)
        .map(|_| draw_vessel(&mut canvas, config, &mut rng))
        .collect();
    let hemorrhages: Vec<(f64, f64, f64)> = (0..config.hemorrhages_per_image)
        .map(|_| draw_hemorrhage(&mut canvas, config, &mut rng))
        .collect();
    let exudates: Vec<(f64, f64, f64)> = (0..config.exudates_per_image)
        .map(|_| draw_exudate(&mut canvas, config, &mut rng))
        .collect();
    // Own stream, so toggling mimics leaves everything else in place.
    let mut mimic_rng = stream_rng(seed, &format!("{id}/mimics"));
    draw_mimics(&mut canvas, config, &vessels, &hemorrhages, &exudates, &mut mimic_rng);

    let mut mask = Mask::zeros(n, n);
    if label == HealthLabel::Lesion {
        let mut placed: Vec<(f64, f64, f64)> = Vec::new();
        let mut attempts = 0;
        while placed.len() < config.lesions_per_image {
            attempts += 1;
            if attempts > 20_000 {
                return Err(Error::Config(format!(
                    "could not place {} lesions in a {n}x{n} image; lower the distractor density",
                    config.lesions_per_image
                )));
            }
            let r = uniform(&mut rng, config.lesion_radius);
            let margin = r + 3.0;
            let cy = rng.random_range(margin..n as f64 - margin).round();
            let cx = rng.random_range(margin..n as f64 - margin).round();
            if !canvas.is_clear(cy, cx, r + 5.0) {
                continue;
            }
            if placed
                .iter()
                .any(|&(py, px, pr)| ((py - cy).powi(2) + (px - cx).powi(2)).sqrt() < pr + r + 4.0)
            {
                continue;
            }
            placed.push((cy, cx, r));
        }
        for &(cy, cx, r) in &placed {
            let depth = uniform(&mut rng, config.lesion_depth);
            // The darkened support is exactly the mask disk.
            canvas.disk(cy, cx, r, depth);
            let reach = r.ceil() as isize;
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    if ((dy * dy + dx * dx) as f64).sqrt() <= r {
                        mask.set((cy as isize + dy) as usize, (cx as isize + dx) as usize, true);
                    }
                }
            }
        }
    }

    let pixels = render_background(config, &canvas, &mut rng);
    FundusImage::new(id, pixels, Some(mask), label)
}

/// Returns the in-image centerline points.
fn draw_vessel<R: Rng + ?Sized>(canvas: &mut Canvas, config: &SynthConfig, rng: &mut R) -> Vec<(f64, f64)> {
    let n = canvas.size as f64;
    let width = uniform(rng, config.vessel_width);
    let depth = uniform(rng, config.vessel_depth);
    let (mut y, mut x) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
    let mut heading = rng.random_range(0.0..2.0 * PI);
    let bend = Normal::new(0.0, 0.06).expect("valid normal");
    let steps = (n * rng.random_range(0.6..1.2)) as usize;
    let half = width / 2.0;
    let mut path = Vec::with_capacity(steps);
    for _ in 0..steps {
        if y >= 0.0 && x >= 0.0 && y < n && x < n {
            path.push((y, x));
        }
        canvas.stamp(y, x, half + 1.0, |dy, dx| {
            let d = (dy * dy + dx * dx).sqrt();
            depth * (half + 0.5 - d).clamp(0.0, 1.0)
        });
        heading += bend.sample(rng);
        y += heading.sin();
        x += heading.cos();
        if y < -half || x < -half || y > n + half || x > n + half {
            break;
        }
    }
    path
}

/// Returns `(cy, cx, nominal radius)`.
fn draw_hemorrhage<R: Rng + ?Sized>(canvas: &mut Canvas, config: &SynthConfig, rng: &mut R) -> (f64, f64, f64) {
    let n = canvas.size as f64;
    let radius = uniform(rng, config.hemorrhage_radius);
    let depth = uniform(rng, config.hemorrhage_depth);
    let aspect = rng.random_range(0.7..1.0);
    let theta = rng.random_range(0.0..PI);
    let wobble_phase = rng.random_range(0.0..2.0 * PI);
    let cy = rng.random_range(0.0..n);
    let cx = rng.random_range(0.0..n);
    let (s, c) = theta.sin_cos();
    canvas.stamp(cy, cx, radius * 1.2 + 2.0, |dy, dx| {
        let u = c * dx + s * dy;
        let v = (-s * dx + c * dy) / aspect;
        let d = (u * u + v * v).sqrt();
        let ang = v.atan2(u);
        let edge = radius * (1.0 + 0.12 * (3.0 * ang + wobble_phase).sin());
        depth * ((edge + 1.5 - d) / 1.5).clamp(0.0, 1.0)
    });
    (cy, cx, radius)
}

fn draw_exudate<R: Rng + ?Sized>(canvas: &mut Canvas, config: &SynthConfig, rng: &mut R) -> (f64, f64, f64) {
    let n = canvas.size as f64;
    let radius = uniform(rng, config.exudate_radius);
    let level = uniform(rng, config.exudate_brightness);
    let cy = rng.random_range(0.0..n);
    let cx = rng.random_range(0.0..n);
    canvas.brighten(cy, cx, radius + 1.0, |dy, dx| {
        level * (radius + 0.5 - (dy * dy + dx * dx).sqrt()).clamp(0.0, 1.0)
    });
    (cy, cx, radius)
}

/// Lesion-sized dark blobs whose only distinguishing feature is what they
/// touch: a vessel, an exudate, or the rim of a hemorrhage.
fn draw_mimics<R: Rng + ?Sized>(
    canvas: &mut Canvas,
    config: &SynthConfig,
    vessels: &[Vec<(f64, f64)>],
    hemorrhages: &[(f64, f64, f64)],
    exudates: &[(f64, f64, f64)],
    rng: &mut R,
) {
    let n = canvas.size as f64;
    for k in 0..config.mimics_per_image {
        let r = uniform(rng, config.lesion_radius);
        let depth = uniform(rng, config.lesion_depth);
        let phi = rng.random_range(0.0..2.0 * PI);
        let (dy, dx) = phi.sin_cos();
        let center = match k % 3 {
            0 if vessels.iter().any(|v| !v.is_empty()) => {
                let live: Vec<&Vec<(f64, f64)>> = vessels.iter().filter(|v| !v.is_empty()).collect();
                let path = live[rng.random_range(0..live.len())];
                Some(path[rng.random_range(0..path.len())])
            }
            1 if !exudates.is_empty() => {
                let (ey, ex, er) = exudates[rng.random_range(0..exudates.len())];
                Some((ey + dy * (er + r + 0.5), ex + dx * (er + r + 0.5)))
            }
            2 if !hemorrhages.is_empty() => {
                // Walk out of the hemorrhage, then leave a one-pixel gap.
                let (hy, hx, hr) = hemorrhages[rng.random_range(0..hemorrhages.len())];
                let mut t = hr * 0.5;
                let inside = |t: f64, c: &Canvas| {
                    let (y, x) = ((hy + dy * t).round(), (hx + dx * t).round());
                    y >= 0.0 && x >= 0.0 && y < n && x < n && c.dark[y as usize * c.size + x as usize] > 0.0
                };
                while t < 3.0 * hr && inside(t, canvas) {
                    t += 0.5;
                }
                Some((hy + dy * (t + r + 1.0), hx + dx * (t + r + 1.0)))
            }
            _ => None,
        };
        if let Some((cy, cx)) = center {
            canvas.disk(cy.round(), cx.round(), r, depth);
        }
    }
}

fn render_background<R: Rng + ?Sized>(config: &SynthConfig, canvas: &Canvas, rng: &mut R) -> Raster {
    let n = canvas.size;
    let base = [
        rng.random_range(155.0..175.0),
        rng.random_range(78.0..92.0),
        rng.random_range(40.0..50.0),
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let period = rng.random_range(80.0..200.0);
            let dir = rng.random_range(0.0..PI);
            let amp = rng.random_range(1.5..4.0);
            (2.0 * PI / period * dir.cos(), 2.0 * PI / period * dir.sin(), rng.random_range(0.0..2.0 * PI), amp)
        })
        .collect();
    let noise = Normal::new(0.0, config.noise_std.max(0.0)).expect("valid normal");
    let half = n as f64 / 2.0;
    let mut out = Raster::zeros(3, n, n);
    for y in 0..n {
        for x in 0..n {
            let (fy, fx) = (y as f64, x as f64);
            let r2 = ((fy - half).powi(2) + (fx - half).powi(2)) / (half * half);
            let illum = 1.0 - 0.15 * r2;
            let texture: f64 = waves.iter().map(|&(ky, kx, ph, a)| a * (ky * fy + kx * fx + ph).sin()).sum();
            let dark = canvas.dark[y * n + x];
            let bright = canvas.bright[y * n + x];
            for (ch, b) in base.iter().enumerate() {
                let v = b * illum + texture * CHANNEL_GAIN[ch] - dark * CHANNEL_GAIN[ch]
                    + bright * BRIGHT_GAIN[ch]
                    + noise.sample(rng);
                out.set(ch, y, x, v.round().clamp(0.0, 255.0));
            }
        }
    }
    out
}
