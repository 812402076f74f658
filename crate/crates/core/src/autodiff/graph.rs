//! Tape of differentiable operations and its reverse sweep.

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv3d { input: NodeId, kernel: NodeId, bias: NodeId, geom: ConvGeom },
    MaxPool3d { input: NodeId, argmax: Vec<usize> },
    Upsample3d { input: NodeId, dims: [usize; 4] },
    Relu(NodeId),
    Sigmoid(NodeId),
    Concat { a: NodeId, b: NodeId },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine { input: NodeId, scale: T },
    Sum(NodeId),
    Select { input: NodeId, index: usize },
    SoftDiceBce { pred: NodeId, target: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Records operations in topological order; [`Graph::backward`] walks the
/// tape in reverse and accumulates gradients into every node that requires
/// them.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Clamp applied to predictions inside the log terms of the BCE loss.
const BCE_CLAMP: f64 = 1e-7;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Input whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Input treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward root with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Vec<T>> {
        self.nodes[id.0].grad.take()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Same-padded cross-correlation: input `[c_in, x, y, z]`, kernel
    /// `[c_out, c_in, k, k, k]` with odd `k`, bias `[c_out]`.
    pub fn conv3d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let [c_in, nx, ny, nz] = self.value(input).dims4()?;
        let ks = self.value(kernel).shape().to_vec();
        let [c_out, kc, k, k2, k3] = ks[..] else {
            return Err(Error::Shape(format!("kernel must be rank 5, got {ks:?}")));
        };
        if kc != c_in {
            return Err(Error::Shape(format!("kernel expects {kc} input channels, input has {c_in}")));
        }
        if k % 2 == 0 || k != k2 || k != k3 {
            return Err(Error::Shape(format!("kernel must be cubic with odd size, got {ks:?}")));
        }
        if self.value(bias).shape() != [c_out] {
            return Err(Error::Shape(format!("bias shape {:?} != [{c_out}]", self.value(bias).shape())));
        }
        let geom = ConvGeom { c_in, c_out, dims: [nx, ny, nz], k };
        let out = kernels::conv3d_forward(&geom, self.value(input).data(), self.value(kernel).data(), self.value(bias).data());
        let value = Tensor::new(vec![c_out, nx, ny, nz], out)?;
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(value, Op::Conv3d { input, kernel, bias, geom }, rg))
    }

    pub fn maxpool3d(&mut self, input: NodeId) -> Result<NodeId> {
        let dims = self.value(input).dims4()?;
        if dims[1..].iter().any(|d| d % 2 != 0) {
            return Err(Error::Shape(format!("max-pool needs even spatial dims, got {dims:?}")));
        }
        let (out, argmax) = kernels::maxpool3d_forward(dims, self.value(input).data());
        let value = Tensor::new(vec![dims[0], dims[1] / 2, dims[2] / 2, dims[3] / 2], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::MaxPool3d { input, argmax }, rg))
    }

    pub fn upsample3d(&mut self, input: NodeId) -> Result<NodeId> {
        let dims = self.value(input).dims4()?;
        let out = kernels::upsample3d_forward(dims, self.value(input).data());
        let value = Tensor::new(vec![dims[0], dims[1] * 2, dims[2] * 2, dims[3] * 2], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Upsample3d { input, dims }, rg))
    }

    fn unary(&mut self, input: NodeId, f: impl Fn(T) -> T, op: Op<T>) -> NodeId {
        let src = self.value(input);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[input]);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        self.unary(input, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        self.unary(input, sigmoid, Op::Sigmoid(input))
    }

    /// `input * scale + shift`.
    pub fn affine(&mut self, input: NodeId, scale: T, shift: T) -> NodeId {
        self.unary(input, |v| v * scale + shift, Op::Affine { input, scale })
    }

    fn same_shape(&self, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "operand shapes differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Stack two `[c, x, y, z]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let da = self.value(a).dims4()?;
        let db = self.value(b).dims4()?;
        if da[1..] != db[1..] {
            return Err(Error::Shape(format!("spatial dims differ: {da:?} vs {db:?}")));
        }
        let mut data = Vec::with_capacity(self.value(a).len() + self.value(b).len());
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(vec![da[0] + db[0], da[1], da[2], da[3]], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s = self.value(input).data().iter().copied().sum();
        let rg = self.rg(&[input]);
        self.push(Tensor::scalar(s), Op::Sum(input), rg)
    }

    /// Scalar element at a flat row-major index.
    pub fn select(&mut self, input: NodeId, index: usize) -> Result<NodeId> {
        let len = self.value(input).len();
        let v = *self
            .value(input)
            .data()
            .get(index)
            .ok_or_else(|| Error::Shape(format!("index {index} out of range for {len} elements")))?;
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::scalar(v), Op::Select { input, index }, rg))
    }

    /// `0.5 * (1 - softDice) + 0.5 * BCE` with `softDice = (2 sum(pt) + 1) / (sum(p) + sum(t) + 1)`.
    pub fn soft_dice_bce(&mut self, pred: NodeId, target: &Tensor<T>) -> Result<NodeId> {
        if self.value(pred).shape() != target.shape() {
            return Err(Error::Shape(format!(
                "prediction {:?} and target {:?} differ",
                self.value(pred).shape(),
                target.shape()
            )));
        }
        if target.data().iter().any(|&t| t != T::zero() && t != T::one()) {
            return Err(Error::NonBinary);
        }
        let p = self.value(pred).data();
        let t = target.data();
        let (inter, sp, st) = dice_sums(p, t);
        let eps = T::one();
        let two = T::of(2.0);
        let half = T::of(0.5);
        let dice = (two * inter + eps) / (sp + st + eps);
        let n = T::of(p.len() as f64);
        let bce = p.iter().zip(t).map(|(&p, &t)| bce_term(p, t)).sum::<T>() / n;
        let loss = half * (T::one() - dice) + half * bce;
        let rg = self.rg(&[pred]);
        Ok(self.push(Tensor::scalar(loss), Op::SoftDiceBce { pred, target: t.to_vec() }, rg))
    }

    /// Reverse sweep from a scalar root. Gradients from any earlier sweep are
    /// cleared first.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else { continue };
            self.propagate(idx, &g);
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn slot(&mut self, id: NodeId) -> Option<&mut Vec<T>> {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(node.grad.get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn accumulate(&mut self, id: NodeId, f: impl Fn(usize) -> T) {
        if let Some(slot) = self.slot(id) {
            for (i, s) in slot.iter_mut().enumerate() {
                *s += f(i);
            }
        }
    }

    fn propagate(&mut self, idx: usize, g: &[T]) {
        // The op is moved out so node values can be borrowed while slots of
        // earlier nodes are mutated.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv3d { input, kernel, bias, geom } => {
                let mut gi = self.nodes[input.0].requires_grad.then(|| vec![T::zero(); self.value(*input).len()]);
                let mut gk = self.nodes[kernel.0].requires_grad.then(|| vec![T::zero(); self.value(*kernel).len()]);
                let mut gb = self.nodes[bias.0].requires_grad.then(|| vec![T::zero(); self.value(*bias).len()]);
                kernels::conv3d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                for (id, local) in [(*input, gi), (*kernel, gk), (*bias, gb)] {
                    if let Some(local) = local {
                        self.accumulate(id, |i| local[i]);
                    }
                }
            }
            Op::MaxPool3d { input, argmax } => {
                if let Some(slot) = self.slot(*input) {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        slot[src] += gv;
                    }
                }
            }
            Op::Upsample3d { input, dims } => {
                if let Some(slot) = self.slot(*input) {
                    kernels::upsample3d_backward(*dims, g, slot);
                }
            }
            Op::Relu(input) => {
                let x = self.value(*input).data().to_vec();
                self.accumulate(*input, |i| if x[i] > T::zero() { g[i] } else { T::zero() });
            }
            Op::Sigmoid(input) => {
                let y = self.nodes[idx].value.data().to_vec();
                self.accumulate(*input, |i| g[i] * y[i] * (T::one() - y[i]));
            }
            Op::Affine { input, scale } => {
                let s = *scale;
                self.accumulate(*input, |i| g[i] * s);
            }
            Op::Add(a, b) => {
                self.accumulate(*a, |i| g[i]);
                self.accumulate(*b, |i| g[i]);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                self.accumulate(*a, |i| g[i] * bv[i]);
                self.accumulate(*b, |i| g[i] * av[i]);
            }
            Op::Concat { a, b } => {
                let split = self.value(*a).len();
                self.accumulate(*a, |i| g[i]);
                self.accumulate(*b, |i| g[split + i]);
            }
            Op::Sum(input) => {
                let g0 = g[0];
                self.accumulate(*input, |_| g0);
            }
            Op::Select { input, index } => {
                if let Some(slot) = self.slot(*input) {
                    slot[*index] += g[0];
                }
            }
            Op::SoftDiceBce { pred, target } => {
                let p = self.value(*pred).data().to_vec();
                let (inter, sp, st) = dice_sums(&p, target);
                let eps = T::one();
                let two = T::of(2.0);
                let half = T::of(0.5);
                let num = two * inter + eps;
                let den = sp + st + eps;
                let n = T::of(p.len() as f64);
                let lo = T::of(BCE_CLAMP);
                let hi = T::one() - lo;
                let g0 = g[0];
                self.accumulate(*pred, |i| {
                    let t = target[i];
                    // d(dice)/dp_i = (2 t_i den - num) / den^2
                    let ddice = (two * t * den - num) / (den * den);
                    let pi = p[i];
                    let dbce = if pi < lo || pi > hi {
                        T::zero()
                    } else {
                        (pi - t) / (pi * (T::one() - pi)) / n
                    };
                    g0 * (-half * ddice + half * dbce)
                });
            }
        }
        self.nodes[idx].op = op;
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn dice_sums<T: Scalar>(p: &[T], t: &[T]) -> (T, T, T) {
    let mut inter = T::zero();
    let mut sp = T::zero();
    let mut st = T::zero();
    for (&p, &t) in p.iter().zip(t) {
        inter += p * t;
        sp += p;
        st += t;
    }
    (inter, sp, st)
}

fn bce_term<T: Scalar>(p: T, t: T) -> T {
    let lo = T::of(BCE_CLAMP);
    let p = p.max(lo).min(T::one() - lo);
    -(t * p.ln() + (T::one() - t) * (T::one() - p).ln())
}
