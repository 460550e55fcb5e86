use rand::Rng;

use super::params::{Init, ParamId, ParamStore};
use super::tape::{NodeId, Tape};

/// Square convolution with "same" padding for odd kernels.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let weight = store.add(format!("{name}.w"), &[out_c, in_c, kernel, kernel], Init::He { fan_in, gain }, rng);
        let bias = Some(store.add(format!("{name}.b"), &[out_c], Init::Zeros, rng));
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        tape.conv(x, self.weight, self.bias, self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, in_d: usize, out_d: usize) -> Self {
        let weight = store.add(format!("{name}.w"), &[out_d, in_d], Init::He { fan_in: in_d, gain: 0.5 }, rng);
        let bias = store.add(format!("{name}.b"), &[out_d], Init::Zeros, rng);
        Self { weight, bias }
    }

    pub fn apply(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        tape.linear(x, self.weight, self.bias)
    }
}
