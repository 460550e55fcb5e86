use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax2, Conv, Linear, NodeId, ParamStore, Tape, Tensor};
use crate::raster::Raster;

const RESIDUAL_GAIN: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// Two 3×3 convolutions.
    Basic,
    /// 1×1 reduce, 3×3, 1×1 expand (width = channels / 4).
    Bottleneck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrnStage {
    pub channels: usize,
    pub blocks: usize,
    pub stride: usize,
}

/// Residual classifier layout. The stem is a strided convolution followed
/// by 2×2 max pooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrnArch {
    pub block: BlockKind,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stages: Vec<PrnStage>,
    pub patch_size: usize,
}

impl PrnArch {
    /// ResNet-50 with the last stage's downsampling removed.
    pub fn resnet50() -> Self {
        Self {
            block: BlockKind::Bottleneck,
            stem_channels: 64,
            stem_kernel: 7,
            stages: vec![
                PrnStage { channels: 256, blocks: 3, stride: 1 },
                PrnStage { channels: 512, blocks: 4, stride: 2 },
                PrnStage { channels: 1024, blocks: 6, stride: 2 },
                PrnStage { channels: 2048, blocks: 3, stride: 1 },
            ],
            patch_size: 129,
        }
    }

    /// ResNet-18-like, 64-dimensional embedding.
    pub fn tiny() -> Self {
        Self {
            block: BlockKind::Basic,
            stem_channels: 8,
            stem_kernel: 5,
            stages: vec![
                PrnStage { channels: 16, blocks: 1, stride: 1 },
                PrnStage { channels: 32, blocks: 1, stride: 2 },
                PrnStage { channels: 64, blocks: 1, stride: 1 },
            ],
            patch_size: 129,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.stages.last().map_or(self.stem_channels, |s| s.channels)
    }

    /// Product of every downsampling step.
    pub fn total_stride(&self) -> usize {
        4 * self.stages.iter().map(|s| s.stride).product::<usize>()
    }

    /// Spatial side of the last feature map for a square input of side `n`.
    pub fn final_feature_side(&self, n: usize) -> usize {
        let k = self.stem_kernel;
        let conv = |n: usize, k: usize, s: usize| (n + 2 * (k / 2) - k) / s + 1;
        let mut side = conv(n, k, 2) / 2;
        for st in &self.stages {
            side = conv(side, 3, st.stride);
        }
        side
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("prn architecture: {m}")));
        if self.stages.is_empty() || self.stem_channels == 0 {
            return bad("at least one stage and a non-empty stem are required");
        }
        if self.stem_kernel % 2 == 0 {
            return bad("stem_kernel must be odd");
        }
        if self.stages.iter().any(|s| s.channels == 0 || s.blocks == 0 || s.stride == 0) {
            return bad("stages need positive channels, blocks and stride");
        }
        if self.block == BlockKind::Bottleneck && self.stages.iter().any(|s| s.channels < 4) {
            return bad("bottleneck stages need at least 4 channels");
        }
        if self.patch_size % 2 == 0 {
            return bad("patch_size must be odd so the patch has a center pixel");
        }
        if self.final_feature_side(self.patch_size) < 1 {
            return bad("patch_size too small for the stage list");
        }
        Ok(())
    }
}

impl Default for PrnArch {
    fn default() -> Self {
        Self::resnet50()
    }
}

#[derive(Debug, Clone)]
struct Block {
    convs: Vec<Conv>,
    projection: Option<Conv>,
}

impl Block {
    fn new(
        p: &mut ParamStore,
        rng: &mut rand_chacha::ChaCha8Rng,
        name: &str,
        kind: BlockKind,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Self {
        let convs = match kind {
            BlockKind::Basic => vec![
                Conv::new(p, rng, &format!("{name}.c1"), c_in, c_out, 3, stride, 1.0),
                Conv::new(p, rng, &format!("{name}.c2"), c_out, c_out, 3, 1, RESIDUAL_GAIN),
            ],
            BlockKind::Bottleneck => {
                let w = c_out / 4;
                vec![
                    Conv::new(p, rng, &format!("{name}.c1"), c_in, w, 1, 1, 1.0),
                    Conv::new(p, rng, &format!("{name}.c2"), w, w, 3, stride, 1.0),
                    Conv::new(p, rng, &format!("{name}.c3"), w, c_out, 1, 1, RESIDUAL_GAIN),
                ]
            }
        };
        let projection =
            (c_in != c_out || stride != 1).then(|| Conv::new(p, rng, &format!("{name}.proj"), c_in, c_out, 1, stride, 1.0));
        Self { convs, projection }
    }

    fn forward(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let mut h = x;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.apply(tape, h);
            if i + 1 < self.convs.len() {
                h = tape.relu(h);
            }
        }
        let skip = match &self.projection {
            Some(p) => p.apply(tape, x),
            None => x,
        };
        let sum = tape.add(skip, h);
        tape.relu(sum)
    }
}

/// Nodes produced by one branch of the forward pass.
#[derive(Debug, Clone, Copy)]
pub struct PrnNodes {
    /// Two-class scores of the center pixel.
    pub logits: NodeId,
    /// Global-average-pooled last stage.
    pub embedding: NodeId,
}

/// Patch-wise refinement network.
#[derive(Debug, Clone)]
pub struct PrnModel {
    pub arch: PrnArch,
    pub params: ParamStore,
    stem: Conv,
    blocks: Vec<Block>,
    head: Linear,
}

impl PrnModel {
    pub fn new(arch: PrnArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let stem = Conv::new(&mut p, &mut rng, "stem", 3, arch.stem_channels, arch.stem_kernel, 2, 1.0);
        let mut blocks = Vec::new();
        let mut c_in = arch.stem_channels;
        for (si, st) in arch.stages.iter().enumerate() {
            for b in 0..st.blocks {
                let stride = if b == 0 { st.stride } else { 1 };
                blocks.push(Block::new(&mut p, &mut rng, &format!("s{si}.b{b}"), arch.block, c_in, st.channels, stride));
                c_in = st.channels;
            }
        }
        let head = Linear::new(&mut p, &mut rng, "head", c_in, 2);
        Ok(Self {
            arch,
            params: p,
            stem,
            blocks,
            head,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.arch.embedding_dim()
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> PrnNodes {
        let h = self.stem.apply(tape, x);
        let h = tape.relu(h);
        let mut h = tape.max_pool(h, 2);
        for b in &self.blocks {
            h = b.forward(tape, h);
        }
        let embedding = tape.gap(h);
        let logits = self.head.apply(tape, embedding);
        PrnNodes { logits, embedding }
    }

    pub fn check_patch(&self, patch: &Raster) -> Result<()> {
        let n = self.arch.patch_size;
        if patch.channels() != 3 || patch.height() != n || patch.width() != n {
            return Err(Error::Input(format!(
                "prn expects a 3x{n}x{n} patch, got {}x{}x{}",
                patch.channels(),
                patch.height(),
                patch.width()
            )));
        }
        Ok(())
    }
}

/// Center-pixel lesion probability and embedding of one preprocessed 1x patch.
pub fn prn_forward(model: &PrnModel, patch: &Raster) -> Result<(f64, Vec<f64>)> {
    model.check_patch(patch)?;
    let mut tape = Tape::inference(&model.params);
    let x = tape.input(Tensor::from(patch.clone()));
    let out = model.forward(&mut tape, x);
    let l = &tape.value(out.logits).data;
    Ok((softmax2(l[0], l[1]), tape.value(out.embedding).data.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn patch(n: usize, seed: u64) -> Raster {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Raster::from_vec(3, n, n, (0..3 * n * n).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn output_contract_and_determinism() {
        let m = PrnModel::new(PrnArch::tiny(), 1).unwrap();
        let x = patch(129, 2);
        let (p, e) = prn_forward(&m, &x).unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert_eq!(e.len(), 64);
        assert!(e.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert_eq!(prn_forward(&m, &x).unwrap(), (p, e));
        assert!(prn_forward(&m, &patch(65, 2)).is_err());
    }

    #[test]
    fn resnet50_layer_arithmetic() {
        let a = PrnArch::resnet50();
        // conv 7x7/2: 129 -> 65, pool /2: 32, stages 1,2,2,1: 32, 16, 8, 8
        assert_eq!(a.final_feature_side(129), 8);
        assert_eq!(a.total_stride(), 32 / 2);
        assert_eq!(a.embedding_dim(), 2048);
        let blocks: usize = a.stages.iter().map(|s| s.blocks).sum();
        assert_eq!(blocks, 16);
        a.validate().unwrap();
    }

    #[test]
    fn traced_feature_side_matches_forward() {
        let arch = PrnArch {
            patch_size: 41,
            ..PrnArch::tiny()
        };
        let m = PrnModel::new(arch.clone(), 0).unwrap();
        let mut tape = Tape::inference(&m.params);
        let x = tape.input(Tensor::from(patch(41, 1)));
        let h = m.stem.apply(&mut tape, x);
        let mut h = tape.max_pool(h, 2);
        for b in &m.blocks {
            h = b.forward(&mut tape, h);
        }
        assert_eq!(tape.value(h).height, arch.final_feature_side(41));
        assert!(arch.final_feature_side(41) >= 2);
    }

    #[test]
    fn bottleneck_blocks_build_and_run() {
        let arch = PrnArch {
            block: BlockKind::Bottleneck,
            stem_channels: 4,
            stem_kernel: 3,
            stages: vec![PrnStage { channels: 8, blocks: 2, stride: 2 }],
            patch_size: 17,
        };
        let m = PrnModel::new(arch, 3).unwrap();
        let (p, e) = prn_forward(&m, &patch(17, 4)).unwrap();
        assert!((0.0..=1.0).contains(&p) && e.len() == 8);
    }
}
