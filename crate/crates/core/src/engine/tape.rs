//! Tensor-level reverse-mode differentiation.
//!
//! The forward pass appends one node per primitive; [`Tape::backward`] walks
//! the nodes in reverse creation order, which is a valid reverse topological
//! order because parents always precede their children.

use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nonlinearity {
    Relu,
    Tanh,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(usize),
    Conv {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        kernel: usize,
        stride: usize,
    },
    Act {
        input: NodeId,
        kind: Nonlinearity,
    },
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients with respect to every node reached by a backward sweep.
#[derive(Clone, Debug)]
pub struct NodeGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl NodeGrads {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.grads.get_mut(id).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { shape, value, op });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, shape: Vec<usize>, value: Vec<f64>) -> NodeId {
        self.push(shape, value, Op::Input)
    }

    pub fn param(&mut self, block: usize, shape: Vec<usize>, value: Vec<f64>) -> NodeId {
        self.push(shape, value, Op::Param(block))
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    /// Parameter block behind a node, if it is a parameter leaf.
    pub fn param_block(&self, id: NodeId) -> Option<usize> {
        match self.nodes[id].op {
            Op::Param(b) => Some(b),
            _ => None,
        }
    }

    /// Same-padded `kernel x kernel` convolution with the given stride.
    /// Weights are `[out, in, k, k]`, bias `[out]`, input `[in, H, W]`.
    pub fn conv(&mut self, input: NodeId, weight: NodeId, bias: NodeId, stride: usize) -> Result<NodeId> {
        let ishape = self.nodes[input].shape.clone();
        let wshape = self.nodes[weight].shape.clone();
        if ishape.len() != 3
            || wshape.len() != 4
            || wshape[1] != ishape[0]
            || wshape[2] != wshape[3]
            || wshape[2].is_multiple_of(2)
        {
            return Err(Error::shape(format!("conv input {ishape:?} with weight {wshape:?}")));
        }
        if self.nodes[bias].shape != [wshape[0]] || stride == 0 {
            return Err(Error::shape("conv bias/stride"));
        }
        let (out, oshape) = conv_forward(
            &self.nodes[input].value,
            [ishape[0], ishape[1], ishape[2]],
            &self.nodes[weight].value,
            &self.nodes[bias].value,
            wshape[0],
            wshape[2],
            stride,
        );
        Ok(self.push(
            oshape.to_vec(),
            out,
            Op::Conv {
                input,
                weight,
                bias,
                kernel: wshape[2],
                stride,
            },
        ))
    }

    pub fn activation(&mut self, input: NodeId, kind: Nonlinearity) -> NodeId {
        let v = &self.nodes[input].value;
        let out = match kind {
            Nonlinearity::Relu => v.iter().map(|&x| x.max(0.0)).collect(),
            Nonlinearity::Tanh => v.iter().map(|&x| x.tanh()).collect(),
        };
        let shape = self.nodes[input].shape.clone();
        self.push(shape, out, Op::Act { input, kind })
    }

    /// Propagates `seeds` backwards. Nodes with id `<= floor` receive their
    /// gradient but are not expanded further.
    pub fn backward(&self, seeds: &[(NodeId, &[f64])], floor: Option<NodeId>) -> Result<NodeGrads> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for &(id, g) in seeds {
            if g.len() != self.nodes[id].value.len() {
                return Err(Error::shape(format!("seed for node {id} has {} values", g.len())));
            }
            accumulate(&mut grads[id], g);
            top = top.max(id);
        }
        let lowest = floor.map_or(0, |f| f + 1);
        for id in (lowest..=top).rev() {
            let Some(g) = grads[id].take() else { continue };
            match self.nodes[id].op {
                Op::Input | Op::Param(_) => {}
                Op::Act { input, kind } => {
                    let y = &self.nodes[id].value;
                    let d: Vec<f64> = match kind {
                        Nonlinearity::Relu => g.iter().zip(y).map(|(g, &y)| if y > 0.0 { *g } else { 0.0 }).collect(),
                        Nonlinearity::Tanh => g.iter().zip(y).map(|(g, &y)| g * (1.0 - y * y)).collect(),
                    };
                    accumulate(&mut grads[input], &d);
                }
                Op::Conv {
                    input,
                    weight,
                    bias,
                    kernel,
                    stride,
                } => {
                    let ishape = &self.nodes[input].shape;
                    let need_input = !matches!(self.nodes[input].op, Op::Input);
                    let (d_in, d_w, d_b) = conv_backward(
                        &self.nodes[input].value,
                        [ishape[0], ishape[1], ishape[2]],
                        &self.nodes[weight].value,
                        kernel,
                        stride,
                        &g,
                        &self.nodes[id].shape,
                        need_input,
                    );
                    if need_input {
                        accumulate(&mut grads[input], &d_in);
                    }
                    accumulate(&mut grads[weight], &d_w);
                    accumulate(&mut grads[bias], &d_b);
                }
            }
            grads[id] = Some(g);
        }
        Ok(NodeGrads { grads })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

/// Output range `[lo, hi)` of output positions whose tap `k` lands inside `[0, n)`.
#[inline]
fn valid_range(out: usize, n: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // o * stride + k - pad <= n - 1
    let hi = if n + pad < k + 1 {
        0
    } else {
        ((n - 1 + pad - k) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

/// Writes tap `(ky, kx)` of channel plane `plane` into `patch`: the input
/// value each output position reads through that tap, or 0 in the padding.
#[allow(clippy::too_many_arguments)]
fn gather_tap(
    plane: &[f64],
    [h, w]: [usize; 2],
    [oh, ow]: [usize; 2],
    ky: usize,
    kx: usize,
    pad: usize,
    stride: usize,
    patch: &mut [f64],
) {
    patch.fill(0.0);
    let (oy_lo, oy_hi) = valid_range(oh, h, ky, pad, stride);
    let (ox_lo, ox_hi) = valid_range(ow, w, kx, pad, stride);
    for oy in oy_lo..oy_hi {
        let row = &plane[(oy * stride + ky - pad) * w..];
        let out = &mut patch[oy * ow..(oy + 1) * ow];
        for ox in ox_lo..ox_hi {
            out[ox] = row[ox * stride + kx - pad];
        }
    }
}

/// Adjoint of [`gather_tap`]: adds `patch` back onto the positions it was read from.
#[allow(clippy::too_many_arguments)]
fn scatter_tap(
    plane: &mut [f64],
    [h, w]: [usize; 2],
    [oh, ow]: [usize; 2],
    ky: usize,
    kx: usize,
    pad: usize,
    stride: usize,
    patch: &[f64],
) {
    let (oy_lo, oy_hi) = valid_range(oh, h, ky, pad, stride);
    let (ox_lo, ox_hi) = valid_range(ow, w, kx, pad, stride);
    for oy in oy_lo..oy_hi {
        let row = &mut plane[(oy * stride + ky - pad) * w..];
        let src = &patch[oy * ow..(oy + 1) * ow];
        for ox in ox_lo..ox_hi {
            row[ox * stride + kx - pad] += src[ox];
        }
    }
}

// Both passes walk the kernel one tap at a time: the tap's input patch is
// gathered once and reused by every output channel with contiguous loops.

fn conv_forward(
    input: &[f64],
    [c_in, h, w]: [usize; 3],
    weight: &[f64],
    bias: &[f64],
    c_out: usize,
    k: usize,
    stride: usize,
) -> (Vec<f64>, [usize; 3]) {
    let pad = k / 2;
    let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
    let n = oh * ow;
    let mut out = vec![0.0; c_out * n];
    for (o, chunk) in out.chunks_exact_mut(n).enumerate() {
        chunk.fill(bias[o]);
    }
    let mut patch = vec![0.0; n];
    for i in 0..c_in {
        let plane = &input[i * h * w..(i + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                gather_tap(plane, [h, w], [oh, ow], ky, kx, pad, stride, &mut patch);
                for (o, out_o) in out.chunks_exact_mut(n).enumerate() {
                    let wv = weight[((o * c_in + i) * k + ky) * k + kx];
                    if wv != 0.0 {
                        out_o.iter_mut().zip(&patch).for_each(|(y, x)| *y += wv * x);
                    }
                }
            }
        }
    }
    (out, [c_out, oh, ow])
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    [c_in, h, w]: [usize; 3],
    weight: &[f64],
    k: usize,
    stride: usize,
    d_out: &[f64],
    oshape: &[usize],
    need_input: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let pad = k / 2;
    let (oh, ow) = (oshape[1], oshape[2]);
    let n = oh * ow;
    let mut d_in = vec![0.0; if need_input { input.len() } else { 0 }];
    let mut d_w = vec![0.0; weight.len()];
    let d_b: Vec<f64> = d_out.chunks_exact(n).map(|g| g.iter().sum()).collect();
    let mut patch = vec![0.0; n];
    let mut d_patch = vec![0.0; n];
    for i in 0..c_in {
        let plane = &input[i * h * w..(i + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                gather_tap(plane, [h, w], [oh, ow], ky, kx, pad, stride, &mut patch);
                d_patch.fill(0.0);
                for (o, g_o) in d_out.chunks_exact(n).enumerate() {
                    let widx = ((o * c_in + i) * k + ky) * k + kx;
                    d_w[widx] += g_o.iter().zip(&patch).map(|(g, x)| g * x).sum::<f64>();
                    if need_input {
                        let wv = weight[widx];
                        d_patch.iter_mut().zip(g_o).for_each(|(d, g)| *d += wv * g);
                    }
                }
                if need_input {
                    scatter_tap(
                        &mut d_in[i * h * w..(i + 1) * h * w],
                        [h, w],
                        [oh, ow],
                        ky,
                        kx,
                        pad,
                        stride,
                        &d_patch,
                    );
                }
            }
        }
    }
    (d_in, d_w, d_b)
}
