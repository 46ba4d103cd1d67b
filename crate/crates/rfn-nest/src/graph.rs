//! Reverse-mode autodiff over a linear tape.
//!
//! Ops append nodes; edges always point from lower to higher index, so a
//! single reverse sweep propagates gradients. A graph is single-threaded by
//! construction (`&mut self` ops); independent graphs may live on separate
//! threads. Within an op the kernels may parallelise, which never changes
//! results bit-wise.

use crate::error::{Error, Result};
use crate::kernels::{self, PadMode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Relu(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        pad: usize,
        mode: PadMode,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Upsample2(NodeId),
    ConcatChannels(Vec<NodeId>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, T),
    Mean(NodeId),
    Sum(NodeId),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    needs_grad: bool,
    op: Op<T>,
}

/// Tape of tensor ops with recorded backward payloads.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that participates in gradient computation.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf excluded from gradient computation (frozen weights, fixed
    /// windows, input images).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated on `id` by the last `backward` call.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        pad: usize,
        mode: PadMode,
    ) -> Result<NodeId> {
        let y = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            self.value(b),
            pad,
            mode,
        )?;
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(y, needs, Op::Conv2d { x, w, b, pad, mode }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(&[x]);
        self.push(y, needs, Op::Relu(x))
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (y, argmax) = kernels::maxpool2_forward(self.value(x))?;
        let needs = self.needs(&[x]);
        Ok(self.push(y, needs, Op::MaxPool2 { x, argmax }))
    }

    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let y = kernels::upsample2_forward(self.value(x))?;
        let needs = self.needs(&[x]);
        Ok(self.push(y, needs, Op::Upsample2(x)))
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor<T>> = xs.iter().map(|&id| self.value(id)).collect();
        let y = kernels::concat_channels(&tensors)?;
        let needs = self.needs(xs);
        Ok(self.push(y, needs, Op::ConcatChannels(xs.to_vec())))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(y, needs, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(y, needs, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(y, needs, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(y, needs, Op::Div(a, b)))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: T) -> NodeId {
        let y = self.value(x).map(|v| v + c);
        let needs = self.needs(&[x]);
        self.push(y, needs, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: T) -> NodeId {
        let y = self.value(x).map(|v| v * c);
        let needs = self.needs(&[x]);
        self.push(y, needs, Op::MulScalar(x, c))
    }

    /// Mean over all elements; result has shape `[1]`.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let y = Tensor::scalar(self.value(x).mean());
        let needs = self.needs(&[x]);
        self.push(y, needs, Op::Mean(x))
    }

    /// Sum over all elements; result has shape `[1]`.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let y = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(&[x]);
        self.push(y, needs, Op::Sum(x))
    }

    /// Reverse sweep from a scalar output. Leaf gradients stay, interior
    /// gradients are dropped once consumed.
    pub fn backward(&mut self, out: NodeId) -> Result<()> {
        if self.value(out).numel() != 1 {
            return Err(Error::config(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(out).shape()
            )));
        }
        for node in self.nodes.iter_mut() {
            node.grad = None;
        }
        self.nodes[out.0].grad = Some(Tensor::scalar(T::one()));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let contributions = self.backward_node(i)?;
            for (id, contrib) in contributions {
                if !self.nodes[id.0].needs_grad {
                    continue;
                }
                match &mut self.nodes[id.0].grad {
                    Some(g) => g.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
            if !matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad = None;
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let gout = self.nodes[i].grad.as_ref().expect("grad present");
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Relu(x) => {
                let gx = self.value(*x).zip_map(gout, |v, g| {
                    if v > T::zero() {
                        g
                    } else {
                        T::zero()
                    }
                })?;
                out.push((*x, gx));
            }
            Op::Conv2d { x, w, b, pad, mode } => {
                let (gx, gw, gb) =
                    kernels::conv2d_backward(self.value(*x), self.value(*w), *pad, *mode, gout)?;
                out.push((*x, gx));
                out.push((*w, gw));
                out.push((*b, gb));
            }
            Op::MaxPool2 { x, argmax } => {
                let gx = kernels::maxpool2_backward(argmax, gout, self.value(*x).shape());
                out.push((*x, gx));
            }
            Op::Upsample2(x) => {
                out.push((*x, kernels::upsample2_backward(gout)));
            }
            Op::ConcatChannels(xs) => {
                let mut c_off = 0;
                for &x in xs {
                    let xc = self.value(x).shape()[1];
                    out.push((x, kernels::slice_channels(gout, c_off, xc)?));
                    c_off += xc;
                }
            }
            Op::Add(a, b) => {
                out.push((*a, gout.clone()));
                out.push((*b, gout.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, gout.clone()));
                out.push((*b, gout.map(|g| -g)));
            }
            Op::Mul(a, b) => {
                out.push((*a, gout.zip_map(self.value(*b), |g, bv| g * bv)?));
                out.push((*b, gout.zip_map(self.value(*a), |g, av| g * av)?));
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                out.push((*a, gout.zip_map(bv, |g, b| g / b)?));
                let av = self.value(*a);
                let mut gb = gout.zip_map(av, |g, a| g * a)?;
                for (g, &b) in gb.data_mut().iter_mut().zip(bv.data()) {
                    *g = -*g / (b * b);
                }
                out.push((*b, gb));
            }
            Op::AddScalar(x) => {
                out.push((*x, gout.clone()));
            }
            Op::MulScalar(x, c) => {
                out.push((*x, gout.scale(*c)));
            }
            Op::Mean(x) => {
                let n = T::from_usize(self.value(*x).numel()).unwrap();
                let g = gout.item() / n;
                out.push((*x, Tensor::full(self.value(*x).shape(), g)));
            }
            Op::Sum(x) => {
                let g = gout.item();
                out.push((*x, Tensor::full(self.value(*x).shape(), g)));
            }
        }
        Ok(out)
    }
}
