use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax2, Conv, NodeId, ParamStore, Tape, Tensor};
use crate::preprocess::Scale;
use crate::prob_map::ProbabilityMap;
use crate::raster::Raster;

/// Gain for the last convolution of every residual branch, so deep stacks
/// start close to the identity.
const RESIDUAL_GAIN: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrruStage {
    pub channels: usize,
    pub units: usize,
}

/// Layout of a full-resolution residual network. Each encoder stage halves
/// the pooling stream resolution, each decoder stage doubles it again; the
/// residual stream stays at input resolution throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HgnArch {
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_units: usize,
    pub residual_channels: usize,
    pub encoder: Vec<FrruStage>,
    pub decoder: Vec<FrruStage>,
    pub head_units: usize,
}

fn stages(spec: &[(usize, usize)]) -> Vec<FrruStage> {
    spec.iter().map(|&(channels, units)| FrruStage { channels, units }).collect()
}

impl HgnArch {
    /// FRRN type A.
    pub fn frrn_a() -> Self {
        Self {
            stem_channels: 48,
            stem_kernel: 5,
            stem_units: 3,
            residual_channels: 32,
            encoder: stages(&[(96, 3), (192, 4), (384, 2), (384, 2)]),
            decoder: stages(&[(192, 2), (192, 2), (96, 2)]),
            head_units: 3,
        }
    }

    /// Desk-scale variant used by tests and the tiny profile.
    pub fn tiny() -> Self {
        Self {
            stem_channels: 8,
            stem_kernel: 3,
            stem_units: 1,
            residual_channels: 8,
            encoder: stages(&[(16, 1), (32, 1)]),
            decoder: stages(&[(16, 1)]),
            head_units: 1,
        }
    }

    /// Input sides must be multiples of this.
    pub fn total_stride(&self) -> usize {
        1 << self.encoder.len()
    }

    /// Upper bound on the distance (in pixels) over which an input pixel
    /// can influence an output pixel.
    pub fn receptive_radius(&self) -> usize {
        let mut r = self.stem_kernel / 2 + 2 * self.stem_units + 2 * self.head_units;
        let mut stride = 1;
        for (i, stage) in self.encoder.iter().chain(&self.decoder).enumerate() {
            stride = if i < self.encoder.len() { stride * 2 } else { stride / 2 };
            // pooling window plus two 3x3 convolutions per unit
            r += stride + stage.units * 3 * stride;
        }
        r + self.total_stride()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("hgn architecture: {m}")));
        if self.stem_channels == 0 || self.residual_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.stem_kernel % 2 == 0 {
            return bad("stem_kernel must be odd");
        }
        if self.encoder.is_empty() {
            return bad("at least one encoder stage is required");
        }
        if self.decoder.len() > self.encoder.len() {
            return bad("more decoder than encoder stages");
        }
        if self.encoder.iter().chain(&self.decoder).any(|s| s.channels == 0 || s.units == 0) {
            return bad("every stage needs channels > 0 and units > 0");
        }
        Ok(())
    }
}

impl Default for HgnArch {
    fn default() -> Self {
        Self::frrn_a()
    }
}

#[derive(Debug, Clone)]
struct ResidualUnit {
    a: Conv,
    b: Conv,
}

impl ResidualUnit {
    fn new(p: &mut ParamStore, rng: &mut rand_chacha::ChaCha8Rng, name: &str, c: usize) -> Self {
        Self {
            a: Conv::new(p, rng, &format!("{name}.a"), c, c, 3, 1, 1.0),
            b: Conv::new(p, rng, &format!("{name}.b"), c, c, 3, 1, RESIDUAL_GAIN),
        }
    }

    fn forward(&self, tape: &mut Tape, y: NodeId) -> NodeId {
        let h = self.a.apply(tape, y);
        let h = tape.relu(h);
        let h = self.b.apply(tape, h);
        tape.add(y, h)
    }
}

#[derive(Debug, Clone)]
struct Frru {
    a: Conv,
    b: Conv,
    to_residual: Conv,
    stride: usize,
}

impl Frru {
    fn forward(&self, tape: &mut Tape, y: NodeId, z: NodeId) -> (NodeId, NodeId) {
        let pooled = tape.max_pool(z, self.stride);
        let h = tape.concat(y, pooled);
        let h = self.a.apply(tape, h);
        let h = tape.relu(h);
        let h = self.b.apply(tape, h);
        let y = tape.relu(h);
        let r = self.to_residual.apply(tape, y);
        let r = tape.upsample(r, self.stride);
        (y, tape.add(z, r))
    }
}

#[derive(Debug, Clone, Copy)]
enum Transition {
    Pool,
    Unpool,
}

/// Hypothesis generation network: per-pixel two-class scores at input
/// resolution.
#[derive(Debug, Clone)]
pub struct HgnModel {
    pub arch: HgnArch,
    pub scale: Scale,
    pub params: ParamStore,
    stem: Conv,
    stem_units: Vec<ResidualUnit>,
    split: Conv,
    stages: Vec<(Transition, Vec<Frru>)>,
    merge: Conv,
    head_units: Vec<ResidualUnit>,
    classifier: Conv,
}

impl HgnModel {
    pub fn new(arch: HgnArch, scale: Scale, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let c0 = arch.stem_channels;
        let rc = arch.residual_channels;
        let stem = Conv::new(&mut p, &mut rng, "stem", 3, c0, arch.stem_kernel, 1, 1.0);
        let stem_units = (0..arch.stem_units).map(|i| ResidualUnit::new(&mut p, &mut rng, &format!("stem_ru{i}"), c0)).collect();
        let split = Conv::new(&mut p, &mut rng, "split", c0, rc, 1, 1, 1.0);

        let mut stages = Vec::new();
        let mut c_in = c0;
        let mut stride = 1;
        for (transition, list, tag) in [(Transition::Pool, &arch.encoder, "enc"), (Transition::Unpool, &arch.decoder, "dec")] {
            for (si, stage) in list.iter().enumerate() {
                stride = match transition {
                    Transition::Pool => stride * 2,
                    Transition::Unpool => stride / 2,
                };
                let units = (0..stage.units)
                    .map(|u| {
                        let name = format!("{tag}{si}.frru{u}");
                        let cin = if u == 0 { c_in } else { stage.channels };
                        Frru {
                            a: Conv::new(&mut p, &mut rng, &format!("{name}.a"), cin + rc, stage.channels, 3, 1, 1.0),
                            b: Conv::new(&mut p, &mut rng, &format!("{name}.b"), stage.channels, stage.channels, 3, 1, 1.0),
                            to_residual: Conv::new(&mut p, &mut rng, &format!("{name}.res"), stage.channels, rc, 1, 1, RESIDUAL_GAIN),
                            stride,
                        }
                    })
                    .collect();
                stages.push((transition, units));
                c_in = stage.channels;
            }
        }
        let merge = Conv::new(&mut p, &mut rng, "merge", c_in + rc, c0, 1, 1, 1.0);
        let head_units = (0..arch.head_units).map(|i| ResidualUnit::new(&mut p, &mut rng, &format!("head_ru{i}"), c0)).collect();
        let classifier = Conv::new(&mut p, &mut rng, "classifier", c0, 2, 1, 1, 0.5);
        Ok(Self {
            arch,
            scale,
            params: p,
            stem,
            stem_units,
            split,
            stages,
            merge,
            head_units,
            classifier,
        })
    }

    /// Appends the forward pass to `tape` and returns the `2×H×W` logits.
    /// Input sides must be multiples of [`HgnArch::total_stride`].
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let h = self.stem.apply(tape, x);
        let mut y = tape.relu(h);
        for u in &self.stem_units {
            y = u.forward(tape, y);
        }
        let mut z = self.split.apply(tape, y);
        let mut stride = 1;
        for (transition, units) in &self.stages {
            match transition {
                Transition::Pool => {
                    y = tape.max_pool(y, 2);
                    stride *= 2;
                }
                Transition::Unpool => {
                    y = tape.upsample(y, 2);
                    stride /= 2;
                }
            }
            for unit in units {
                (y, z) = unit.forward(tape, y, z);
            }
        }
        if stride > 1 {
            y = tape.upsample(y, stride);
        }
        let h = tape.concat(y, z);
        let h = self.merge.apply(tape, h);
        let mut y = tape.relu(h);
        for u in &self.head_units {
            y = u.forward(tape, y);
        }
        self.classifier.apply(tape, y)
    }

    /// Lesion probabilities of a `2×H×W` logit tensor, row-major.
    pub fn probabilities(logits: &Tensor) -> Vec<f64> {
        let n = logits.plane_len();
        logits.data[..n].iter().zip(&logits.data[n..]).map(|(&s0, &s1)| softmax2(s0, s1)).collect()
    }
}

/// Lesion probability map of one preprocessed `3×H×W` raster. Sides that are
/// not multiples of the total stride are reflection-padded and cropped back.
pub fn hgn_forward(model: &HgnModel, input: &Raster) -> Result<ProbabilityMap> {
    if input.channels() != 3 {
        return Err(Error::Input(format!("hgn input must have 3 channels, got {}", input.channels())));
    }
    if input.is_empty() {
        return Err(Error::Input("hgn input is empty".into()));
    }
    let (h, w) = (input.height(), input.width());
    let padded = input.pad_to_multiple(model.arch.total_stride());
    let mut tape = Tape::inference(&model.params);
    let x = tape.input(Tensor::from(padded));
    let logits = model.forward(&mut tape, x);
    let out = tape.value(logits);
    let probs = HgnModel::probabilities(out);
    let pw = out.width;
    let values = (0..h * w).map(|i| probs[(i / w) * pw + i % w]).collect();
    ProbabilityMap::new(h, w, values, model.scale, "")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hgn::loss::{batch_loss, ClassWeights};
    use rand::{Rng, SeedableRng};

    fn random_raster(c: usize, h: usize, w: usize, seed: u64) -> Raster {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Raster::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    /// Two FRRUs with eight channels at one pooling level.
    fn gradcheck_arch() -> HgnArch {
        HgnArch {
            stem_channels: 8,
            stem_kernel: 3,
            stem_units: 0,
            residual_channels: 8,
            encoder: vec![FrruStage { channels: 8, units: 2 }],
            decoder: vec![],
            head_units: 0,
        }
    }

    #[test]
    fn output_shape_and_normalization() {
        let m = HgnModel::new(HgnArch::tiny(), Scale::Full, 1).unwrap();
        let x = random_raster(3, 32, 32, 2);
        let mut tape = Tape::inference(&m.params);
        let i = tape.input(Tensor::from(x.clone()));
        let out = m.forward(&mut tape, i);
        let logits = tape.value(out);
        assert_eq!((logits.channels, logits.height, logits.width), (2, 32, 32));
        for p in HgnModel::probabilities(logits) {
            let q = 1.0 - p;
            assert!((p + q - 1.0).abs() < 1e-5 && (0.0..=1.0).contains(&p));
        }
        let a = hgn_forward(&m, &x).unwrap();
        let b = hgn_forward(&m, &x).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn odd_sizes_are_padded_and_cropped() {
        let m = HgnModel::new(HgnArch::tiny(), Scale::Half, 1).unwrap();
        let out = hgn_forward(&m, &random_raster(3, 13, 21, 3)).unwrap();
        assert_eq!((out.height, out.width, out.scale), (13, 21, Scale::Half));
        assert!(hgn_forward(&m, &random_raster(1, 8, 8, 3)).is_err());
    }

    #[test]
    fn full_frrn_a_layout() {
        let m = HgnModel::new(HgnArch::frrn_a(), Scale::Full, 0).unwrap();
        assert_eq!(m.arch.total_stride(), 16);
        let frrus = m.stages.iter().map(|(_, u)| u.len()).sum::<usize>();
        assert_eq!(frrus, 17);
        let strides: Vec<usize> = m.stages.iter().map(|(_, u)| u[0].stride).collect();
        assert_eq!(strides, vec![2, 4, 8, 16, 8, 4, 2]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = HgnModel::new(gradcheck_arch(), Scale::Full, 11).unwrap();
        let xs = [random_raster(3, 8, 8, 4), random_raster(3, 8, 8, 5)];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let targets: Vec<Vec<u8>> = (0..2).map(|_| (0..64).map(|_| (rng.random::<f64>() < 0.3) as u8).collect()).collect();
        let w = ClassWeights {
            negative: 1.0,
            positive: 2.0,
        };
        let loss = |m: &HgnModel| -> (f64, crate::nn::Grads) {
            let tapes: Vec<_> = xs
                .iter()
                .map(|x| {
                    let mut t = Tape::new(&m.params);
                    let i = t.input(Tensor::from(x.clone()));
                    let o = m.forward(&mut t, i);
                    (t, o)
                })
                .collect();
            let logits: Vec<&Tensor> = tapes.iter().map(|(t, o)| t.value(*o)).collect();
            let tg: Vec<&[u8]> = targets.iter().map(|t| t.as_slice()).collect();
            let (terms, seeds) = batch_loss(&logits, &tg, w, 1.0, 1.0).unwrap();
            let parts: Vec<_> = tapes.iter().zip(&seeds).map(|((t, o), s)| t.backward(&[(*o, s)])).collect();
            (terms.total, crate::nn::Grads::sum(&m.params, &parts))
        };
        let (_, analytic) = loss(&m);
        let h = 1e-6;
        let mut checked = 0;
        for pi in 0..m.params.len() {
            let n = m.params.params()[pi].data.len();
            for _ in 0..3 {
                let k = rng.random_range(0..n);
                let orig = m.params.params()[pi].data[k];
                m.params.params_mut()[pi].data[k] = orig + h;
                let up = loss(&m).0;
                m.params.params_mut()[pi].data[k] = orig - h;
                let down = loss(&m).0;
                m.params.params_mut()[pi].data[k] = orig;
                let num = (up - down) / (2.0 * h);
                let a = analytic.data[pi][k];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-7);
                assert!(rel < 1e-4, "{} [{k}]: analytic {a} numeric {num}", m.params.params()[pi].name);
                checked += 1;
            }
        }
        assert!(checked >= 30);
    }

    #[test]
    fn translation_covariant_at_stride_granularity() {
        let m = HgnModel::new(HgnArch::tiny(), Scale::Full, 9).unwrap();
        let s = m.arch.total_stride();
        let base = random_raster(3, 96 + s, 96 + s, 8);
        let a = base.crop_top_left(96, 96);
        let mut b = Raster::zeros(3, 96, 96);
        for c in 0..3 {
            for y in 0..96 {
                for x in 0..96 {
                    b.set(c, y, x, base.get(c, y + s, x + s));
                }
            }
        }
        let (pa, pb) = (hgn_forward(&m, &a).unwrap(), hgn_forward(&m, &b).unwrap());
        let margin = 32;
        for y in margin..96 - margin - s {
            for x in margin..96 - margin - s {
                assert!((pa.get(y + s, x + s) - pb.get(y, x)).abs() < 1e-4);
            }
        }
    }
}
