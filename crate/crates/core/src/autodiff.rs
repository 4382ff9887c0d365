//! Minimal reverse-mode automatic differentiation over a fixed op set.
//!
//! Nodes are evaluated eagerly when pushed, so insertion order is a valid
//! topological order and every node caches its forward value. `backward`
//! walks the tape once in reverse.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Names of the supported operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Input,
    Constant,
    Affine,
    Conv2d,
    Relu,
    ChannelScale,
    Add,
    Mul,
    Scale,
    Upsample,
    Mean,
    MaskedMean,
}

impl OpKind {
    pub const ALL: [OpKind; 12] = [
        OpKind::Input,
        OpKind::Constant,
        OpKind::Affine,
        OpKind::Conv2d,
        OpKind::Relu,
        OpKind::ChannelScale,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Upsample,
        OpKind::Mean,
        OpKind::MaskedMean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Constant => "constant",
            OpKind::Affine => "affine",
            OpKind::Conv2d => "conv2d",
            OpKind::Relu => "relu",
            OpKind::ChannelScale => "channel_scale",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Upsample => "upsample",
            OpKind::Mean => "mean",
            OpKind::MaskedMean => "masked_mean",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Constant,
    Affine {
        x: NodeId,
        weight: Arc<Tensor>,
    },
    Conv2d {
        x: NodeId,
        weight: Arc<Tensor>,
    },
    Relu(NodeId),
    ChannelScale {
        scale: NodeId,
        x: NodeId,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Upsample(NodeId),
    Mean(NodeId),
    MaskedMean {
        x: NodeId,
        mask: Arc<Vec<bool>>,
        count: usize,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Constant => OpKind::Constant,
            Op::Affine { .. } => OpKind::Affine,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu(_) => OpKind::Relu,
            Op::ChannelScale { .. } => OpKind::ChannelScale,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Upsample(_) => OpKind::Upsample,
            Op::Mean(_) => OpKind::Mean,
            Op::MaskedMean { .. } => OpKind::MaskedMean,
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Tape of eagerly evaluated nodes.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to the graph's inputs.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `id`; `None` when the input did not influence the output.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for `id`, zeros when it did not influence the output.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!("node {} not in graph", id.0)));
        }
        Ok(())
    }

    /// Differentiable input.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn affine(&mut self, x: NodeId, weight: Arc<Tensor>, bias: &[f64]) -> Result<NodeId> {
        self.check(x)?;
        let v = tensor::affine(self.value(x), &weight, bias)?;
        Ok(self.push(Op::Affine { x, weight }, v))
    }

    pub fn conv2d(&mut self, x: NodeId, weight: Arc<Tensor>, bias: &[f64]) -> Result<NodeId> {
        self.check(x)?;
        let v = tensor::conv2d(self.value(x), &weight, bias)?;
        Ok(self.push(Op::Conv2d { x, weight }, v))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = tensor::relu(self.value(x));
        Ok(self.push(Op::Relu(x), v))
    }

    /// `scale[c] * x[c, ..]` where `scale` is a `[c]` node.
    pub fn channel_scale(&mut self, scale: NodeId, x: NodeId) -> Result<NodeId> {
        self.check(scale)?;
        self.check(x)?;
        let v = tensor::channel_scale(self.value(scale).data(), self.value(x))?;
        Ok(self.push(Op::ChannelScale { scale, x }, v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.check(a)?;
        let v = tensor::scale(self.value(a), s);
        Ok(self.push(Op::Scale(a, s), v))
    }

    /// Nearest-neighbour upsampling of the trailing two dimensions.
    pub fn upsample(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        self.check(x)?;
        let v = tensor::upsample_nearest(self.value(x), h, w)?;
        Ok(self.push(Op::Upsample(x), v))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = Tensor::scalar(self.value(x).mean());
        Ok(self.push(Op::Mean(x), v))
    }

    /// Mean over the elements where `mask` is set; 0 when the mask is empty.
    pub fn masked_mean(&mut self, x: NodeId, mask: Arc<Vec<bool>>) -> Result<NodeId> {
        self.check(x)?;
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return shape_err(format!("mask of {} for tensor of {}", mask.len(), xv.len()));
        }
        let count = mask.iter().filter(|&&m| m).count();
        let sum: f64 = xv
            .data()
            .iter()
            .zip(mask.iter())
            .filter(|(_, &m)| m)
            .map(|(v, _)| v)
            .sum();
        let v = Tensor::scalar(if count == 0 { 0.0 } else { sum / count as f64 });
        Ok(self.push(Op::MaskedMean { x, mask, count }, v))
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        self.check(output)?;
        if self.value(output).len() != 1 {
            return shape_err(format!(
                "backward seed must be scalar, got shape {:?}",
                self.value(output).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::new(self.value(output).shape().to_vec(), vec![1.0])?);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Constant => {}
                Op::Affine { x, weight } => {
                    let (o, i) = (weight.shape()[0], weight.shape()[1]);
                    let mut gx = vec![0.0; i];
                    for r in 0..o {
                        let gr = g.data()[r];
                        if gr == 0.0 {
                            continue;
                        }
                        for (c, gxc) in gx.iter_mut().enumerate() {
                            *gxc += weight.data()[r * i + c] * gr;
                        }
                    }
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::new(shape, gx)?)?;
                }
                Op::Conv2d { x, weight } => {
                    let gx = tensor::conv2d_backward_input(&g, weight)?;
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, gx.reshape(shape)?)?;
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(g.shape().to_vec(), data)?)?;
                }
                Op::ChannelScale { scale, x } => {
                    let sv = self.value(*scale).data().to_vec();
                    let xv = self.value(*x);
                    let (c, h, w) = xv.dims3()?;
                    let plane = h * w;
                    let mut gs = vec![0.0; c];
                    for (ch, gsc) in gs.iter_mut().enumerate() {
                        *gsc = g.data()[ch * plane..(ch + 1) * plane]
                            .iter()
                            .zip(&xv.data()[ch * plane..(ch + 1) * plane])
                            .map(|(a, b)| a * b)
                            .sum();
                    }
                    let gx = tensor::channel_scale(&sv, &g)?;
                    accumulate(&mut grads, *scale, Tensor::new(self.value(*scale).shape().to_vec(), gs)?)?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Mul(a, b) => {
                    let ga = tensor::mul(&g, self.value(*b))?;
                    let gb = tensor::mul(&g, self.value(*a))?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, tensor::scale(&g, *s))?;
                }
                Op::Upsample(x) => {
                    let xv = self.value(*x);
                    let (sh, sw) = xv.spatial();
                    let (th, tw) = g.spatial();
                    let c = xv.channels();
                    let mut gx = vec![0.0; xv.len()];
                    for ch in 0..c {
                        let gsrc = g.channel_slice(ch);
                        for i in 0..th {
                            let si = tensor::nearest_source(i, sh, th);
                            for j in 0..tw {
                                let sj = tensor::nearest_source(j, sw, tw);
                                gx[(ch * sh + si) * sw + sj] += gsrc[i * tw + j];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), gx)?)?;
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let n = xv.len().max(1) as f64;
                    accumulate(&mut grads, *x, Tensor::full(xv.shape(), g.data()[0] / n))?;
                }
                Op::MaskedMean { x, mask, count } => {
                    let xv = self.value(*x);
                    let gv = if *count == 0 {
                        0.0
                    } else {
                        g.data()[0] / *count as f64
                    };
                    let data = mask.iter().map(|&m| if m { gv } else { 0.0 }).collect();
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), data)?)?;
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Evaluate and differentiate in one call; returns the scalar value.
    pub fn forward_backward(&self, output: NodeId) -> Result<(f64, Gradients)> {
        let grads = self.backward(output)?;
        Ok((self.value(output).data()[0], grads))
    }

    /// ReLU activation pattern, used to detect kink crossings in gradient checks.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.nodes[x.0].value.data().iter().map(|&v| v > 0.0)),
                _ => None,
            })
            .flatten()
            .collect()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}
