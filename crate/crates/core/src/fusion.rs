//! Whole-image inference: per-scale hypothesis maps, upsampling, ROI-gated
//! patch refinement and pixelwise map combination.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::CenterRef;
use crate::error::{Error, Result};
use crate::hgn::{hgn_forward, HgnModel};
use crate::preprocess::{prepare, Scale};
use crate::prn::{score_centers, PrnModel};
use crate::prob_map::ProbabilityMap;
use crate::raster::{FundusImage, Mask, Raster};

/// Whole-image forward passes above this many input pixels switch to tiling.
pub const DEFAULT_WHOLE_IMAGE_LIMIT: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileConfig {
    /// Side of the region each tile contributes; rounded up to the network stride.
    pub core: usize,
    /// Context added on every side; rounded up to the network stride and
    /// raised to at least the receptive radius.
    pub overlap: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self { core: 256, overlap: 0 }
    }
}

/// Full-image probability map at the model's scale. Images larger than
/// `whole_image_limit` pixels are processed in overlapping tiles whose
/// output equals the whole-image forward pass.
pub fn infer_hgn_fullimage(model: &HgnModel, image: &FundusImage, whole_image_limit: usize, tiles: TileConfig) -> Result<ProbabilityMap> {
    let mut map = if image.height() * image.width() <= whole_image_limit {
        hgn_forward(model, &image.pixels)?
    } else {
        infer_tiled(model, &image.pixels, tiles)?
    };
    map.source_id = image.id.clone();
    Ok(map)
}

/// Overlap-and-crop tiling. Tiles start on stride multiples and are clipped
/// to the (stride-padded) image, so every tile sees the same borders as the
/// whole-image pass.
pub fn infer_tiled(model: &HgnModel, pixels: &Raster, tiles: TileConfig) -> Result<ProbabilityMap> {
    if pixels.channels() != 3 || pixels.is_empty() {
        return Err(Error::Input("hgn input must be a non-empty 3-channel raster".into()));
    }
    let s = model.arch.total_stride();
    let round = |v: usize| v.div_ceil(s) * s;
    let core = round(tiles.core.max(1));
    let overlap = round(tiles.overlap.max(model.arch.receptive_radius()));
    let (h, w) = (pixels.height(), pixels.width());
    let padded = pixels.pad_to_multiple(s);
    let (ph, pw) = (padded.height(), padded.width());
    let mut values = vec![0.0; h * w];
    let origins = |n: usize| (0..n).step_by(core).collect::<Vec<_>>();
    let jobs: Vec<(usize, usize)> = origins(ph)
        .into_iter()
        .flat_map(|y| origins(pw).into_iter().map(move |x| (y, x)))
        .collect();
    let results = crate::par::map(&jobs, |&(y0, x0)| {
        let (ty, tx) = (y0.saturating_sub(overlap), x0.saturating_sub(overlap));
        let (by, bx) = ((y0 + core + overlap).min(ph), (x0 + core + overlap).min(pw));
        let mut tile = Raster::zeros(3, by - ty, bx - tx);
        for c in 0..3 {
            for y in ty..by {
                for x in tx..bx {
                    tile.set(c, y - ty, x - tx, padded.get(c, y, x));
                }
            }
        }
        hgn_forward(model, &tile).map(|m| (ty, tx, m))
    });
    for (&(y0, x0), r) in jobs.iter().zip(results) {
        let (ty, tx, m) = r?;
        for y in y0..(y0 + core).min(h) {
            for x in x0..(x0 + core).min(w) {
                values[y * w + x] = m.get(y - ty, x - tx);
            }
        }
    }
    ProbabilityMap::new(h, w, values, model.scale, "")
}

/// Doubles a half-scale map with bilinear interpolation (align-corners-false:
/// output pixel `x` samples source coordinate `(x + 0.5)/2 − 0.5`, clamped to
/// the source extent) and crops to `height`×`width`.
pub fn upsample_linear(map: &ProbabilityMap, height: usize, width: usize) -> Result<ProbabilityMap> {
    if height > 2 * map.height || width > 2 * map.width || map.values.is_empty() {
        return Err(Error::Input(format!(
            "cannot upsample a {}x{} map to {height}x{width}",
            map.height, map.width
        )));
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = taps(map.height, height);
    let xs = taps(map.width, width);
    let mut values = Vec::with_capacity(height * width);
    for &(y0, y1, ly) in &ys {
        for &(x0, x1, lx) in &xs {
            let top = map.get(y0, x0) * (1.0 - lx) + map.get(y0, x1) * lx;
            let bottom = map.get(y1, x0) * (1.0 - lx) + map.get(y1, x1) * lx;
            values.push((top * (1.0 - ly) + bottom * ly).clamp(0.0, 1.0));
        }
    }
    ProbabilityMap::new(height, width, values, Scale::Full, map.source_id.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    Arithmetic,
    Geometric,
}

impl Combine {
    pub fn as_str(self) -> &'static str {
        match self {
            Combine::Arithmetic => "arithmetic",
            Combine::Geometric => "geometric",
        }
    }
}

/// Pixelwise mean of two maps: `(a+b)/2` or `√(a·b)`.
pub fn fuse(a: &ProbabilityMap, b: &ProbabilityMap, mode: Combine) -> Result<ProbabilityMap> {
    fuse_all(&[a, b], mode)
}

/// Pixelwise arithmetic or geometric mean of any number of maps.
pub fn fuse_all(maps: &[&ProbabilityMap], mode: Combine) -> Result<ProbabilityMap> {
    let first = maps.first().ok_or_else(|| Error::Input("nothing to fuse".into()))?;
    if let Some(m) = maps.iter().find(|m| !m.same_dims(first)) {
        return Err(Error::Input(format!(
            "cannot fuse {}x{} with {}x{}",
            first.height, first.width, m.height, m.width
        )));
    }
    let n = maps.len() as f64;
    let values = (0..first.values.len())
        .map(|i| {
            let v = match mode {
                Combine::Arithmetic => maps.iter().map(|m| m.values[i]).sum::<f64>() / n,
                Combine::Geometric => {
                    if maps.len() == 2 {
                        (maps[0].values[i] * maps[1].values[i]).sqrt()
                    } else {
                        maps.iter().map(|m| m.values[i]).product::<f64>().powf(1.0 / n)
                    }
                }
            };
            v.clamp(0.0, 1.0)
        })
        .collect();
    ProbabilityMap::new(first.height, first.width, values, first.scale, first.source_id.clone())
}

/// What refinement writes at pixels outside the region of interest.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gating {
    /// Probability 0.
    #[default]
    Zero,
    /// The hypothesis map's own value.
    Passthrough,
}

/// Refines several full-scale maps of one image with a single pass over the
/// union of their regions of interest (pixels `>= threshold`). Returns the
/// refined maps and the number of patch evaluations.
pub fn refine_many(
    maps: &[&ProbabilityMap],
    prn: &PrnModel,
    image: &FundusImage,
    threshold: f64,
    gating: Gating,
) -> Result<(Vec<ProbabilityMap>, usize)> {
    let (h, w) = (image.height(), image.width());
    if let Some(m) = maps.iter().find(|m| m.height != h || m.width != w) {
        return Err(Error::Input(format!(
            "map {}x{} does not match image {}x{}",
            m.height, m.width, h, w
        )));
    }
    let mut roi: Vec<usize> = (0..h * w).filter(|&i| maps.iter().any(|m| m.values[i] >= threshold)).collect();
    roi.dedup();
    let centers: Vec<CenterRef> = roi
        .iter()
        .map(|&i| CenterRef {
            image: 0,
            row: (i / w) as u32,
            col: (i % w) as u32,
        })
        .collect();
    let scores = score_centers(prn, std::slice::from_ref(image), &centers);
    let lookup: HashMap<usize, f64> = roi.iter().copied().zip(scores).collect();
    let out = maps
        .iter()
        .map(|m| {
            let values = m
                .values
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    if v >= threshold {
                        lookup[&i]
                    } else {
                        match gating {
                            Gating::Zero => 0.0,
                            Gating::Passthrough => v,
                        }
                    }
                })
                .collect();
            ProbabilityMap::new(h, w, values, Scale::Full, m.source_id.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, lookup.len()))
}

/// Replaces every pixel `>= threshold` by the refinement network's
/// center-pixel probability of the patch around it.
pub fn refine(map: &ProbabilityMap, prn: &PrnModel, image: &FundusImage, threshold: f64, gating: Gating) -> Result<ProbabilityMap> {
    Ok(refine_many(&[map], prn, image, threshold, gating)?.0.remove(0))
}

/// One row of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PipelineMode {
    Hgn1x,
    Hgn05x,
    Hgn(Combine),
    Cls(Combine),
    Prn(Combine),
}

impl PipelineMode {
    pub const ALL: [PipelineMode; 8] = [
        PipelineMode::Hgn1x,
        PipelineMode::Hgn05x,
        PipelineMode::Hgn(Combine::Arithmetic),
        PipelineMode::Hgn(Combine::Geometric),
        PipelineMode::Cls(Combine::Arithmetic),
        PipelineMode::Cls(Combine::Geometric),
        PipelineMode::Prn(Combine::Arithmetic),
        PipelineMode::Prn(Combine::Geometric),
    ];

    /// Ablation table row label.
    pub fn row_name(self) -> String {
        match self {
            PipelineMode::Hgn1x => "HGN 1x".into(),
            PipelineMode::Hgn05x => "HGN 0.5x".into(),
            PipelineMode::Hgn(c) => format!("HGN {}", c.as_str()),
            PipelineMode::Cls(c) => format!("cls {}", c.as_str()),
            PipelineMode::Prn(c) => format!("PRN {}", c.as_str()),
        }
    }
}

impl fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineMode::Hgn1x => f.write_str("hgn-1x"),
            PipelineMode::Hgn05x => f.write_str("hgn-0.5x"),
            PipelineMode::Hgn(c) => write!(f, "hgn-{}", c.as_str()),
            PipelineMode::Cls(c) => write!(f, "cls-{}", c.as_str()),
            PipelineMode::Prn(c) => write!(f, "prn-{}", c.as_str()),
        }
    }
}

impl FromStr for PipelineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PipelineMode::ALL
            .into_iter()
            .find(|m| m.to_string() == s || m.row_name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<String> = PipelineMode::ALL.iter().map(|m| m.to_string()).collect();
                Error::Usage(format!("unknown mode `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineOptions {
    pub sigma_divisor: f64,
    /// Region-of-interest threshold for refinement.
    pub threshold: f64,
    pub gating: Gating,
    /// Also feed the two raw hypothesis maps into the final combination.
    pub include_raw: bool,
    pub whole_image_limit: usize,
    pub tiles: TileConfig,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            sigma_divisor: 30.0,
            threshold: 0.5,
            gating: Gating::Zero,
            include_raw: false,
            whole_image_limit: DEFAULT_WHOLE_IMAGE_LIMIT,
            tiles: TileConfig::default(),
        }
    }
}

/// Trained models available to the pipeline.
#[derive(Debug, Clone, Default)]
pub struct PipelineModels {
    pub hgn_1x: Option<HgnModel>,
    pub hgn_05x: Option<HgnModel>,
    /// Refinement network trained with the triplet loss.
    pub prn: Option<PrnModel>,
    /// Refinement network trained with cross-entropy only.
    pub cls: Option<PrnModel>,
}

fn missing(what: &str, mode: PipelineMode) -> Error {
    Error::Usage(format!("mode {mode} needs the {what} model"))
}

/// Per-image inference state. Hypothesis maps are computed once; refined
/// maps are computed once per classifier on first use.
pub struct ImageInference<'a> {
    models: &'a PipelineModels,
    opts: &'a PipelineOptions,
    image_1x: FundusImage,
    map_1x: Option<ProbabilityMap>,
    map_05x_up: Option<ProbabilityMap>,
    refined: HashMap<bool, (ProbabilityMap, ProbabilityMap)>,
    /// Patch evaluations spent on refinement so far.
    pub prn_evaluations: usize,
}

impl<'a> ImageInference<'a> {
    /// `image` is raw (unenhanced); preprocessing happens here.
    pub fn new(image: &FundusImage, models: &'a PipelineModels, opts: &'a PipelineOptions) -> Result<Self> {
        let image_1x = prepare(image, Scale::Full, opts.sigma_divisor)?;
        let map_1x = models
            .hgn_1x
            .as_ref()
            .map(|m| infer_hgn_fullimage(m, &image_1x, opts.whole_image_limit, opts.tiles))
            .transpose()?;
        let map_05x_up = match &models.hgn_05x {
            Some(m) => {
                let half = prepare(image, Scale::Half, opts.sigma_divisor)?;
                let map = infer_hgn_fullimage(m, &half, opts.whole_image_limit, opts.tiles)?;
                Some(upsample_linear(&map, image.height(), image.width())?)
            }
            None => None,
        };
        Ok(Self {
            models,
            opts,
            image_1x,
            map_1x,
            map_05x_up,
            refined: HashMap::new(),
            prn_evaluations: 0,
        })
    }

    fn hgn_maps(&self, mode: PipelineMode) -> Result<(&ProbabilityMap, &ProbabilityMap)> {
        Ok((
            self.map_1x.as_ref().ok_or_else(|| missing("1x hgn", mode))?,
            self.map_05x_up.as_ref().ok_or_else(|| missing("0.5x hgn", mode))?,
        ))
    }

    fn refined(&mut self, triplet: bool, mode: PipelineMode) -> Result<(&ProbabilityMap, &ProbabilityMap)> {
        if !self.refined.contains_key(&triplet) {
            let model = if triplet { &self.models.prn } else { &self.models.cls };
            let model = model.as_ref().ok_or_else(|| missing(if triplet { "prn" } else { "cls" }, mode))?;
            let (a, b) = self.hgn_maps(mode)?;
            let (mut maps, evals) = refine_many(&[a, b], model, &self.image_1x, self.opts.threshold, self.opts.gating)?;
            self.prn_evaluations += evals;
            let b = maps.pop().expect("two maps");
            let a = maps.pop().expect("two maps");
            self.refined.insert(triplet, (a, b));
        }
        let (a, b) = &self.refined[&triplet];
        Ok((a, b))
    }

    pub fn output(&mut self, mode: PipelineMode) -> Result<ProbabilityMap> {
        let include_raw = self.opts.include_raw;
        let mut out = match mode {
            PipelineMode::Hgn1x => self.map_1x.clone().ok_or_else(|| missing("1x hgn", mode))?,
            PipelineMode::Hgn05x => self.map_05x_up.clone().ok_or_else(|| missing("0.5x hgn", mode))?,
            PipelineMode::Hgn(c) => {
                let (a, b) = self.hgn_maps(mode)?;
                fuse(a, b, c)?
            }
            PipelineMode::Cls(c) | PipelineMode::Prn(c) => {
                let triplet = matches!(mode, PipelineMode::Prn(_));
                let (ra, rb) = {
                    let (a, b) = self.refined(triplet, mode)?;
                    (a.clone(), b.clone())
                };
                if include_raw {
                    let (a, b) = self.hgn_maps(mode)?;
                    fuse_all(&[&ra, &rb, a, b], c)?
                } else {
                    fuse(&ra, &rb, c)?
                }
            }
        };
        out.source_id = self.image_1x.id.clone();
        out.scale = Scale::Full;
        Ok(out)
    }
}

/// Final full-scale probability map of one raw image in one mode.
pub fn run_pipeline(image: &FundusImage, models: &PipelineModels, mode: PipelineMode, opts: &PipelineOptions) -> Result<ProbabilityMap> {
    ImageInference::new(image, models, opts)?.output(mode)
}

/// RGB visualization at `threshold`: with a mask, green marks true
/// positives, red false positives and cyan false negatives; without one,
/// predicted lesion pixels are green. Other pixels keep the image.
pub fn overlay(pixels: &Raster, map: &ProbabilityMap, mask: Option<&Mask>, threshold: f64) -> Result<Raster> {
    if pixels.height() != map.height || pixels.width() != map.width {
        return Err(Error::Input("overlay image and map differ in size".into()));
    }
    if mask.is_some_and(|m| m.height() != map.height || m.width() != map.width) {
        return Err(Error::Input("overlay mask and map differ in size".into()));
    }
    let mut out = Raster::zeros(3, map.height, map.width);
    for y in 0..map.height {
        for x in 0..map.width {
            let pred = map.get(y, x) >= threshold;
            let truth = mask.map(|m| m.get(y, x) == 1);
            let color = match (pred, truth) {
                (true, Some(true)) | (true, None) => Some([0.0, 255.0, 0.0]),
                (true, Some(false)) => Some([255.0, 0.0, 0.0]),
                (false, Some(true)) => Some([0.0, 255.0, 255.0]),
                _ => None,
            };
            for c in 0..3 {
                let v = match color {
                    Some(rgb) => rgb[c],
                    None => pixels.get(c.min(pixels.channels() - 1), y, x),
                };
                out.set(c, y, x, v);
            }
        }
    }
    Ok(out)
}
