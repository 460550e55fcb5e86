//! Single-sample reverse-mode tape.
//!
//! A forward pass appends one node per operation. [`Tape::backward`] walks the
//! nodes in reverse, accumulating parameter gradients into a [`Grads`] aligned
//! with the tape's [`ParamStore`]. Tapes built with [`Tape::inference`] skip
//! the caches that only backward needs.

use super::conv::{col2im, gemm, im2col, ConvGeom};
use super::params::{Grads, ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Conv {
        x: NodeId,
        weight: ParamId,
        bias: Option<ParamId>,
        geom: ConvGeom,
        cols: Option<Vec<f64>>,
    },
    Relu(NodeId),
    Add(NodeId, NodeId),
    MaxPool {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Upsample {
        x: NodeId,
        factor: usize,
    },
    Concat(NodeId, NodeId),
    Gap(NodeId),
    Linear {
        x: NodeId,
        weight: ParamId,
        bias: ParamId,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    record: bool,
}

impl<'p> Tape<'p> {
    /// A tape that retains everything needed for [`Tape::backward`].
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A forward-only tape.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Square-kernel convolution; weight dims are `[out, in, k, k]`.
    pub fn conv(&mut self, x: NodeId, weight: ParamId, bias: Option<ParamId>, stride: usize, pad: usize) -> NodeId {
        let dims = &self.params.get(weight).dims;
        let (out_c, in_c, k) = (dims[0], dims[1], dims[2]);
        let input = &self.nodes[x.0].value;
        assert_eq!(input.channels, in_c, "conv input channels");
        let geom = ConvGeom {
            in_channels: in_c,
            height: input.height,
            width: input.width,
            kernel: k,
            stride,
            pad,
        };
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let n = ho * wo;
        let mut out = Tensor::zeros(out_c, ho, wo);
        let w = self.params.data(weight);
        let cols = if geom.is_pointwise() {
            gemm(out_c, in_c, n, w, false, &input.data, false, &mut out.data, false);
            None
        } else {
            let cols = im2col(&input.data, &geom);
            gemm(out_c, geom.patch_len(), n, w, false, &cols, false, &mut out.data, false);
            Some(cols)
        };
        if let Some(b) = bias {
            let b = self.params.data(b);
            for (o, plane) in out.data.chunks_mut(n).enumerate() {
                plane.iter_mut().for_each(|v| *v += b[o]);
            }
        }
        let cols = if self.record { cols } else { None };
        self.push(
            out,
            Op::Conv {
                x,
                weight,
                bias,
                geom,
                cols,
            },
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut v = self.nodes[x.0].value.clone();
        v.data.iter_mut().for_each(|a| *a = a.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(va.same_shape(vb), "add shape mismatch");
        let mut v = va.clone();
        v.data.iter_mut().zip(&vb.data).for_each(|(x, y)| *x += y);
        self.push(v, Op::Add(a, b))
    }

    /// Non-overlapping `size`×`size` max pooling (floor on odd sizes).
    pub fn max_pool(&mut self, x: NodeId, size: usize) -> NodeId {
        let input = &self.nodes[x.0].value;
        let (ho, wo) = (input.height / size, input.width / size);
        let mut out = Tensor::zeros(input.channels, ho, wo);
        let mut argmax = vec![0u32; out.len()];
        for c in 0..input.channels {
            let plane = input.plane(c);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for dy in 0..size {
                        for dx in 0..size {
                            let i = (oy * size + dy) * input.width + ox * size + dx;
                            if plane[i] > best {
                                best = plane[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (c * ho + oy) * wo + ox;
                    out.data[o] = best;
                    argmax[o] = best_i as u32;
                }
            }
        }
        self.push(out, Op::MaxPool { x, argmax })
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, x: NodeId, factor: usize) -> NodeId {
        let input = &self.nodes[x.0].value;
        let (h, w) = (input.height * factor, input.width * factor);
        let mut out = Tensor::zeros(input.channels, h, w);
        for c in 0..input.channels {
            let src = input.plane(c);
            for y in 0..h {
                for xx in 0..w {
                    out.data[(c * h + y) * w + xx] = src[(y / factor) * input.width + xx / factor];
                }
            }
        }
        self.push(out, Op::Upsample { x, factor })
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(va.height == vb.height && va.width == vb.width, "concat spatial mismatch");
        let mut data = Vec::with_capacity(va.len() + vb.len());
        data.extend_from_slice(&va.data);
        data.extend_from_slice(&vb.data);
        let v = Tensor {
            channels: va.channels + vb.channels,
            height: va.height,
            width: va.width,
            data,
        };
        self.push(v, Op::Concat(a, b))
    }

    /// Global average pooling to a `C×1×1` vector.
    pub fn gap(&mut self, x: NodeId) -> NodeId {
        let input = &self.nodes[x.0].value;
        let n = input.plane_len() as f64;
        let v: Vec<f64> = (0..input.channels).map(|c| input.plane(c).iter().sum::<f64>() / n).collect();
        self.push(Tensor::vector(v), Op::Gap(x))
    }

    /// Fully connected layer on a flattened input; weight dims `[out, in]`.
    pub fn linear(&mut self, x: NodeId, weight: ParamId, bias: ParamId) -> NodeId {
        let dims = &self.params.get(weight).dims;
        let (out_d, in_d) = (dims[0], dims[1]);
        let input = &self.nodes[x.0].value;
        assert_eq!(input.len(), in_d, "linear input size");
        let w = self.params.data(weight);
        let b = self.params.data(bias);
        let v: Vec<f64> = (0..out_d)
            .map(|o| b[o] + w[o * in_d..(o + 1) * in_d].iter().zip(&input.data).map(|(a, c)| a * c).sum::<f64>())
            .collect();
        self.push(Tensor::vector(v), Op::Linear { x, weight, bias })
    }

    /// Back-propagates the given output gradients and returns parameter gradients.
    pub fn backward(&self, seeds: &[(NodeId, &[f64])]) -> Grads {
        assert!(self.record, "backward on an inference tape");
        let mut grads = self.params.zero_grads();
        let mut node_grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for &(id, g) in seeds {
            assert_eq!(g.len(), self.nodes[id.0].value.len(), "seed gradient size");
            accumulate(&mut node_grads, id, self.nodes[id.0].value.len(), |dst| {
                dst.iter_mut().zip(g).for_each(|(a, b)| *a += b)
            });
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(grad) = node_grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Conv {
                    x,
                    weight,
                    bias,
                    geom,
                    cols,
                } => {
                    let out_c = node.value.channels;
                    let n = node.value.plane_len();
                    if let Some(b) = bias {
                        let gb = grads.get_mut(*b);
                        for (o, plane) in grad.chunks(n).enumerate() {
                            gb[o] += plane.iter().sum::<f64>();
                        }
                    }
                    let input = &self.nodes[x.0].value;
                    let k = geom.patch_len();
                    let col_src: &[f64] = match cols {
                        Some(c) => c,
                        None => &input.data,
                    };
                    gemm(out_c, n, k, &grad, false, col_src, true, grads.get_mut(*weight), true);
                    let w = self.params.data(*weight);
                    let in_len = input.len();
                    if geom.is_pointwise() {
                        accumulate(&mut node_grads, *x, in_len, |dst| {
                            gemm(k, out_c, n, w, true, &grad, false, dst, true)
                        });
                    } else {
                        let mut dcols = vec![0.0; k * n];
                        gemm(k, out_c, n, w, true, &grad, false, &mut dcols, false);
                        accumulate(&mut node_grads, *x, in_len, |dst| col2im(&dcols, geom, dst));
                    }
                }
                Op::Relu(x) => {
                    let out = &node.value.data;
                    accumulate(&mut node_grads, *x, out.len(), |dst| {
                        for ((d, g), o) in dst.iter_mut().zip(&grad).zip(out) {
                            if *o > 0.0 {
                                *d += g;
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    for id in [a, b] {
                        accumulate(&mut node_grads, *id, grad.len(), |dst| {
                            dst.iter_mut().zip(&grad).for_each(|(d, g)| *d += g)
                        });
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let input = &self.nodes[x.0].value;
                    let plane_in = input.plane_len();
                    let plane_out = node.value.plane_len();
                    accumulate(&mut node_grads, *x, input.len(), |dst| {
                        for (o, (&g, &a)) in grad.iter().zip(argmax).enumerate() {
                            let c = o / plane_out;
                            dst[c * plane_in + a as usize] += g;
                        }
                    });
                }
                Op::Upsample { x, factor } => {
                    let input = &self.nodes[x.0].value;
                    let (h, w) = (node.value.height, node.value.width);
                    accumulate(&mut node_grads, *x, input.len(), |dst| {
                        for c in 0..input.channels {
                            for y in 0..h {
                                for xx in 0..w {
                                    dst[(c * input.height + y / factor) * input.width + xx / factor] +=
                                        grad[(c * h + y) * w + xx];
                                }
                            }
                        }
                    });
                }
                Op::Concat(a, b) => {
                    let la = self.nodes[a.0].value.len();
                    let lb = self.nodes[b.0].value.len();
                    accumulate(&mut node_grads, *a, la, |dst| {
                        dst.iter_mut().zip(&grad[..la]).for_each(|(d, g)| *d += g)
                    });
                    accumulate(&mut node_grads, *b, lb, |dst| {
                        dst.iter_mut().zip(&grad[la..]).for_each(|(d, g)| *d += g)
                    });
                }
                Op::Gap(x) => {
                    let input = &self.nodes[x.0].value;
                    let n = input.plane_len();
                    accumulate(&mut node_grads, *x, input.len(), |dst| {
                        for (c, plane) in dst.chunks_mut(n).enumerate() {
                            let g = grad[c] / n as f64;
                            plane.iter_mut().for_each(|d| *d += g);
                        }
                    });
                }
                Op::Linear { x, weight, bias } => {
                    let input = &self.nodes[x.0].value;
                    let in_d = input.len();
                    {
                        let gb = grads.get_mut(*bias);
                        gb.iter_mut().zip(&grad).for_each(|(d, g)| *d += g);
                    }
                    {
                        let gw = grads.get_mut(*weight);
                        for (o, &g) in grad.iter().enumerate() {
                            for (d, xi) in gw[o * in_d..(o + 1) * in_d].iter_mut().zip(&input.data) {
                                *d += g * xi;
                            }
                        }
                    }
                    let w = self.params.data(*weight);
                    accumulate(&mut node_grads, *x, in_d, |dst| {
                        for (o, &g) in grad.iter().enumerate() {
                            for (d, wi) in dst.iter_mut().zip(&w[o * in_d..(o + 1) * in_d]) {
                                *d += g * wi;
                            }
                        }
                    });
                }
            }
        }
        grads
    }
}

fn accumulate(node_grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = node_grads[id.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}
