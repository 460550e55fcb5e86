//! Minimal CPU convolutional network engine in double precision.
//!
//! Models own a [`ParamStore`] and describe their forward pass on a per-sample
//! [`Tape`]. Mini-batches are processed one tape per sample (in parallel) and
//! gradients are summed in sample order.

mod adam;
mod conv;
mod layers;
mod params;
mod tape;
mod tensor;

pub use adam::Adam;
pub use conv::{col2im, gemm, im2col, ConvGeom};
pub use layers::{Conv, Linear};
pub use params::{Grads, Init, Param, ParamId, ParamStore};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

/// Numerically stable two-class softmax; returns `p(class 1)`.
pub fn softmax2(s0: f64, s1: f64) -> f64 {
    let d = s1 - s0;
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}
