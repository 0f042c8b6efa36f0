//! Reverse-mode differentiation on an append-only tape.
//!
//! Every operation appends a node holding its output value and whatever the
//! backward rule needs. Nodes only reference earlier nodes, so reverse index
//! order is a valid reverse topological order and each node is visited once.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{check_permutation, inverse_permutation, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Permute,
    Reshape,
    Concat,
    Narrow,
    Repeat,
    Matmul,
    Add,
    Sub,
    Mul,
    Scale,
    Tanh,
    Relu,
    Sum,
    Mean,
    Conv,
    Linear,
    BatchNorm,
    Gap,
    AvgPool,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 21] = [
        OpKind::Leaf,
        OpKind::Permute,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::Repeat,
        OpKind::Matmul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Conv,
        OpKind::Linear,
        OpKind::BatchNorm,
        OpKind::Gap,
        OpKind::AvgPool,
        OpKind::CrossEntropy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Permute => "permute",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::Repeat => "repeat",
            OpKind::Matmul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Conv => "conv",
            OpKind::Linear => "linear",
            OpKind::BatchNorm => "batchnorm",
            OpKind::Gap => "gap",
            OpKind::AvgPool => "avgpool",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown op {s:?}")))
    }
}

/// Batch statistics produced by a train-mode batch-norm node.
#[derive(Clone, Debug)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Unbiased (n-1) variance, the value folded into running statistics.
    pub var_unbiased: Vec<S>,
}

enum Op<S: Scalar> {
    Leaf,
    Permute { x: Var, order: Vec<usize> },
    Reshape { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Repeat { x: Var, count: usize },
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: S },
    Tanh { x: Var },
    Relu { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom },
    Linear { x: Var, w: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, inv_std: Vec<S>, train: bool },
    Gap { x: Var },
    AvgPool { x: Var, k: usize },
    CrossEntropy { logits: Var, q: Vec<S>, probs: Vec<S>, tau: S },
}

impl<S: Scalar> Op<S> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Permute { .. } => OpKind::Permute,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Repeat { .. } => OpKind::Repeat,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Tanh { .. } => OpKind::Tanh,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Conv { .. } => OpKind::Conv,
            Op::Linear { .. } => OpKind::Linear,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Gap { .. } => OpKind::Gap,
            Op::AvgPool { .. } => OpKind::AvgPool,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    bound: HashMap<ParamId, Var>,
    fault: Option<OpKind>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            fault: None,
        }
    }

    /// Tape whose backward rule for `kind` is deliberately wrong (sign
    /// flipped). Used as a negative control for gradient checking.
    pub fn with_fault(kind: OpKind) -> Self {
        Self {
            fault: Some(kind),
            ..Self::new()
        }
    }

    pub fn fault(&self) -> Option<OpKind> {
        self.fault
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Sign pattern (`x > 0`) of every ReLU input on the tape, in recording order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu { x } = node.op {
                out.extend(self.nodes[x.0].value.data().iter().map(|&v| v > S::zero()));
            }
        }
        out
    }

    /// Gradient accumulated on a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf holding `t`; tracked for gradients when `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor<S>) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    /// Binds a stored parameter as a leaf, once per tape.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let mut t = store.get(id).clone();
        t.zero_grad();
        t.set_requires_grad(store.kind(id) == ParamKind::Trainable);
        let v = self.leaf(t);
        self.nodes[v.0].param = Some(id);
        self.bound.insert(id, v);
        v
    }

    /// Gradients of every bound parameter that received one.
    pub fn param_grads(&self) -> Vec<(ParamId, &[S])> {
        let mut out: Vec<_> = self
            .bound
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn permute(&mut self, x: Var, order: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(order)?;
        Ok(self.push(out, Op::Permute { x, order: order.to_vec() }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let refs: Vec<&Tensor<S>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat(&refs, axis)?;
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow(axis, start, len)?;
        Ok(self.push(out, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Stacks `count` copies of `x` along a new leading axis.
    pub fn repeat(&mut self, x: Var, count: usize) -> Result<Var> {
        if count == 0 {
            return Err(Error::invalid("repeat count must be positive"));
        }
        let src = self.value(x);
        let mut shape = vec![count];
        shape.extend_from_slice(src.shape());
        let mut data = Vec::with_capacity(count * src.numel());
        for _ in 0..count {
            data.extend_from_slice(src.data());
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Repeat { x, count }, &[x]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::Matmul { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Var {
        let out = self.value(x).scale(factor);
        self.push(out, Op::Scale { x, factor }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).tanh();
        self.push(out, Op::Tanh { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).relu();
        self.push(out, Op::Relu { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        self.push(out, Op::Mean { x }, &[x])
    }

    /// Convolution over 1 to 3 spatial axes. `x` is `(N, C_in, spatial…)`,
    /// `w` is `(C_out, C_in, kernel…)` with the same spatial rank.
    pub fn conv(&mut self, x: Var, w: Var, b: Var, stride: &[usize], pad: &[usize]) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let sp = xs.len().checked_sub(2).filter(|r| (1..=3).contains(r));
        let Some(sp) = sp else {
            return Err(Error::shape(format!("conv input must have 1-3 spatial axes, got {xs:?}")));
        };
        if ws.len() != xs.len() || stride.len() != sp || pad.len() != sp {
            return Err(Error::shape(format!(
                "conv weight {ws:?}, stride {stride:?}, pad {pad:?} do not match input {xs:?}"
            )));
        }
        if ws[1] != xs[1] {
            return Err(Error::shape(format!(
                "conv channel mismatch: input has {} channels, weight expects {}",
                xs[1], ws[1]
            )));
        }
        if self.value(b).shape() != [ws[0]] {
            return Err(Error::shape(format!("conv bias must have shape [{}]", ws[0])));
        }
        let lift = |v: &[usize], fill: usize| {
            let mut a = [fill; 3];
            a[..v.len()].copy_from_slice(v);
            a
        };
        let geom = ConvGeom::new(
            xs[0],
            xs[1],
            ws[0],
            lift(&xs[2..], 1),
            lift(&ws[2..], 1),
            lift(stride, 1),
            lift(pad, 0),
        )?;
        let data = kernels::conv_forward(&geom, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut shape = vec![geom.batch, geom.c_out];
        shape.extend_from_slice(&geom.output[..sp]);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Conv { x, w, b, geom }, &[x, w, b]))
    }

    /// `x · wᵀ + b` for `x` (N, in), `w` (out, in), `b` (out).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, fin) = match xv.shape() {
            [n, f] => (*n, *f),
            s => return Err(Error::shape(format!("linear input must be (N, in), got {s:?}"))),
        };
        let fout = match wv.shape() {
            [o, i] if *i == fin => *o,
            s => {
                return Err(Error::shape(format!(
                    "linear feature mismatch: input has {fin} features, weight is {s:?}"
                )))
            }
        };
        if bv.shape() != [fout] {
            return Err(Error::shape(format!("linear bias must have shape [{fout}]")));
        }
        let mut data = Vec::with_capacity(n * fout);
        for _ in 0..n {
            data.extend_from_slice(bv.data());
        }
        crate::tensor::matmul_a_bt_into(xv.data(), wv.data(), &mut data, n, fin, fout);
        let out = Tensor::new([n, fout], data)?;
        Ok(self.push(out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Per-channel normalization of `(N, C, …)`. Train mode uses batch
    /// statistics and returns them; eval mode uses `running`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: S,
        running: Option<(&[S], &[S])>,
    ) -> Result<(Var, Option<BatchStats<S>>)> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(format!("batch norm needs (N, C, …), got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(format!("batch norm affine parameters must have shape [{c}]")));
        }
        let train = running.is_none();
        if train && n < 2 {
            return Err(Error::DegenerateBatch(n));
        }
        let count = n * inner;
        let data = xv.data();
        let at = |s: usize, ch: usize, i: usize| data[(s * c + ch) * inner + i];
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        match running {
            None => {
                for ch in 0..c {
                    let mut acc = S::zero();
                    for s in 0..n {
                        for i in 0..inner {
                            acc = acc + at(s, ch, i);
                        }
                    }
                    mean[ch] = acc / S::from_usize(count);
                    let mut sq = S::zero();
                    for s in 0..n {
                        for i in 0..inner {
                            let d = at(s, ch, i) - mean[ch];
                            sq = sq + d * d;
                        }
                    }
                    var[ch] = sq / S::from_usize(count);
                }
            }
            Some((rm, rv)) => {
                mean.copy_from_slice(rm);
                var.copy_from_slice(rv);
            }
        }
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let (g, bta) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![S::zero(); data.len()];
        let mut out = vec![S::zero(); data.len()];
        for s in 0..n {
            for ch in 0..c {
                for i in 0..inner {
                    let o = (s * c + ch) * inner + i;
                    xhat[o] = (data[o] - mean[ch]) * inv_std[ch];
                    out[o] = xhat[o] * g[ch] + bta[ch];
                }
            }
        }
        let stats = train.then(|| {
            let bessel = S::from_usize(count) / S::from_usize((count - 1).max(1));
            BatchStats {
                var_unbiased: var.iter().map(|&v| v * bessel).collect(),
                mean,
            }
        });
        let out = Tensor::new(shape, out)?;
        let v = self.push(
            out,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    /// Mean over every axis after the first two: `(N, C, …) -> (N, C)`.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 3 {
            return Err(Error::shape(format!(
                "global average pooling needs a spatial axis, got {:?}",
                xv.shape()
            )));
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let inner: usize = xv.shape()[2..].iter().product();
        let norm = S::from_usize(inner);
        let data: Vec<S> = xv
            .data()
            .chunks(inner)
            .map(|ch| ch.iter().fold(S::zero(), |a, &v| a + v) / norm)
            .collect();
        let out = Tensor::new([n, c], data)?;
        Ok(self.push(out, Op::Gap { x }, &[x]))
    }

    /// Non-overlapping `k×k` average pooling over the last two axes of a rank-4 tensor.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = *xv.shape() else {
            return Err(Error::shape(format!("avg_pool2d needs rank 4, got {:?}", xv.shape())));
        };
        if k == 0 || h < k || w < k {
            return Err(Error::shape(format!("pool window {k} does not fit {h}x{w}")));
        }
        let data = kernels::avg_pool2d(xv.data(), n * c, h, w, k);
        let out = Tensor::new([n, c, h / k, w / k], data)?;
        Ok(self.push(out, Op::AvgPool { x, k }, &[x]))
    }

    /// Mean over the batch of label-smoothed cross entropy with temperature.
    /// `logits` is `(N, K)`.
    pub fn cross_entropy_smoothed(&mut self, logits: Var, targets: &[usize], eps: S, tau: S) -> Result<Var> {
        let lv = self.value(logits);
        let [n, k] = *lv.shape() else {
            return Err(Error::shape(format!("logits must be (N, K), got {:?}", lv.shape())));
        };
        if tau <= S::zero() {
            return Err(Error::invalid("temperature must be positive"));
        }
        if k < 2 {
            return Err(Error::invalid("cross entropy needs at least 2 classes"));
        }
        if targets.len() != n || targets.iter().any(|&t| t >= k) {
            return Err(Error::invalid(format!("targets {targets:?} invalid for {n} rows of {k} classes")));
        }
        if eps < S::zero() || eps >= S::one() {
            return Err(Error::invalid("label smoothing must lie in [0, 1)"));
        }
        let mut probs = vec![S::zero(); n * k];
        let mut q = vec![S::zero(); n * k];
        let mut total = S::zero();
        let uniform = eps / S::from_usize(k);
        for (r, row) in lv.data().chunks(k).enumerate() {
            let scaled: Vec<S> = row.iter().map(|&z| z / tau).collect();
            let max = scaled.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let lse = max + scaled.iter().fold(S::zero(), |a, &v| a + (v - max).exp()).ln();
            let mut loss = S::zero();
            for j in 0..k {
                let log_p = scaled[j] - lse;
                probs[r * k + j] = log_p.exp();
                let qj = uniform + if j == targets[r] { S::one() - eps } else { S::zero() };
                q[r * k + j] = qj;
                loss = loss - qj * log_p;
            }
            total = total + loss;
        }
        let out = Tensor::scalar(total / S::from_usize(n));
        Ok(self.push(out, Op::CrossEntropy { logits, q, probs, tau }, &[logits]))
    }

    /// Accumulates `∂loss/∂leaf` into every trainable leaf's gradient buffer.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(mut dy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if self.fault == Some(self.nodes[i].op.kind()) {
                dy.iter_mut().for_each(|g| *g = -*g);
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&dy);
                continue;
            }
            for (input, g) in self.backward_rule(i, &dy)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backward_rule(&self, i: usize, dy: &[S]) -> Result<Vec<(Var, Vec<S>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Permute { x, order } => {
                check_permutation(order, order.len())?;
                let g = Tensor::new(node.value.shape().to_vec(), dy.to_vec())?
                    .permute(&inverse_permutation(order))?;
                vec![(*x, g.into_data())]
            }
            Op::Reshape { x } => vec![(*x, dy.to_vec())],
            Op::Concat { parts, axis } => {
                let g = Tensor::new(node.value.shape().to_vec(), dy.to_vec())?;
                let sizes: Vec<usize> = parts.iter().map(|&p| val(p).shape()[*axis]).collect();
                let pieces = g.split(*axis, &sizes)?;
                parts.iter().copied().zip(pieces.into_iter().map(Tensor::into_data)).collect()
            }
            Op::Narrow { x, axis, start } => {
                let src = val(*x).shape();
                let inner: usize = src[axis + 1..].iter().product();
                let outer: usize = src[..*axis].iter().product();
                let len = node.value.shape()[*axis];
                let mut g = vec![S::zero(); val(*x).numel()];
                for o in 0..outer {
                    let dst = (o * src[*axis] + start) * inner;
                    g[dst..dst + len * inner].copy_from_slice(&dy[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, g)]
            }
            Op::Repeat { x, count } => {
                let m = val(*x).numel();
                let mut g = vec![S::zero(); m];
                for c in 0..*count {
                    for (a, &b) in g.iter_mut().zip(&dy[c * m..(c + 1) * m]) {
                        *a = *a + b;
                    }
                }
                vec![(*x, g)]
            }
            Op::Matmul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (batch, m, k, n) = crate::tensor::matmul_dims(av.shape(), bv.shape())?;
                let mut da = vec![S::zero(); av.numel()];
                let mut db = vec![S::zero(); bv.numel()];
                for bi in 0..batch {
                    let dyb = &dy[bi * m * n..(bi + 1) * m * n];
                    crate::tensor::matmul_a_bt_into(
                        dyb,
                        &bv.data()[bi * k * n..(bi + 1) * k * n],
                        &mut da[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                    crate::tensor::matmul_at_b_into(
                        &av.data()[bi * m * k..(bi + 1) * m * k],
                        dyb,
                        &mut db[bi * k * n..(bi + 1) * k * n],
                        k,
                        m,
                        n,
                    );
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Add { a, b } => vec![
                (*a, reduce_to(val(*a), dy.to_vec())),
                (*b, reduce_to(val(*b), dy.to_vec())),
            ],
            Op::Sub { a, b } => vec![
                (*a, reduce_to(val(*a), dy.to_vec())),
                (*b, reduce_to(val(*b), dy.iter().map(|&g| -g).collect())),
            ],
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let da: Vec<S> = dy.iter().enumerate().map(|(j, &g)| g * broadcast_at(bv, j)).collect();
                let db: Vec<S> = dy.iter().enumerate().map(|(j, &g)| g * broadcast_at(av, j)).collect();
                vec![(*a, reduce_to(av, da)), (*b, reduce_to(bv, db))]
            }
            Op::Scale { x, factor } => vec![(*x, dy.iter().map(|&g| g * *factor).collect())],
            Op::Tanh { x } => {
                let y = node.value.data();
                vec![(*x, dy.iter().zip(y).map(|(&g, &t)| g * (S::one() - t * t)).collect())]
            }
            Op::Relu { x } => {
                let xv = val(*x).data();
                vec![(*x, dy.iter().zip(xv).map(|(&g, &v)| if v > S::zero() { g } else { S::zero() }).collect())]
            }
            Op::Sum { x } => vec![(*x, vec![dy[0]; val(*x).numel()])],
            Op::Mean { x } => {
                let n = val(*x).numel();
                vec![(*x, vec![dy[0] / S::from_usize(n); n])]
            }
            Op::Conv { x, w, b, geom } => {
                let grads = kernels::conv_backward(geom, val(*x).data(), val(*w).data(), dy);
                vec![(*x, grads.dx), (*w, grads.dweight), (*b, grads.dbias)]
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, fin) = (xv.shape()[0], xv.shape()[1]);
                let fout = wv.shape()[0];
                let mut dx = vec![S::zero(); n * fin];
                crate::tensor::matmul_into(dy, wv.data(), &mut dx, n, fout, fin);
                let mut dw = vec![S::zero(); fout * fin];
                crate::tensor::matmul_at_b_into(dy, xv.data(), &mut dw, fout, n, fin);
                let mut db = vec![S::zero(); fout];
                for row in dy.chunks(fout) {
                    db.iter_mut().zip(row).for_each(|(a, &g)| *a = *a + g);
                }
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let shape = val(*x).shape();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let g = val(*gamma).data();
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        for i in 0..inner {
                            let o = (s * c + ch) * inner + i;
                            dgamma[ch] = dgamma[ch] + dy[o] * xhat[o];
                            dbeta[ch] = dbeta[ch] + dy[o];
                        }
                    }
                }
                let mut dx = vec![S::zero(); dy.len()];
                let count = S::from_usize(n * inner);
                for s in 0..n {
                    for ch in 0..c {
                        let scale = g[ch] * inv_std[ch];
                        for i in 0..inner {
                            let o = (s * c + ch) * inner + i;
                            dx[o] = if *train {
                                // dβ and dγ are the per-channel sums of dy and dy·x̂.
                                scale * (dy[o] - dbeta[ch] / count - xhat[o] * dgamma[ch] / count)
                            } else {
                                scale * dy[o]
                            };
                        }
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Gap { x } => {
                let inner: usize = val(*x).shape()[2..].iter().product();
                let norm = S::from_usize(inner);
                let dx = dy.iter().flat_map(|&g| std::iter::repeat_n(g / norm, inner)).collect();
                vec![(*x, dx)]
            }
            Op::AvgPool { x, k } => {
                let [n, c, h, w] = *val(*x).shape() else { unreachable!() };
                vec![(*x, kernels::avg_pool2d_backward(dy, n * c, h, w, *k))]
            }
            Op::CrossEntropy { logits, q, probs, tau } => {
                let rows = val(*logits).shape()[0];
                let scale = dy[0] / (*tau * S::from_usize(rows));
                let dx = probs.iter().zip(q).map(|(&p, &t)| (p - t) * scale).collect();
                vec![(*logits, dx)]
            }
        };
        Ok(out)
    }
}

fn broadcast_at<S: Scalar>(t: &Tensor<S>, j: usize) -> S {
    if t.numel() == 1 {
        t.data()[0]
    } else {
        t.data()[j]
    }
}

/// Sums a full-size gradient down to a single-element operand when needed.
fn reduce_to<S: Scalar>(operand: &Tensor<S>, g: Vec<S>) -> Vec<S> {
    if operand.numel() == 1 && g.len() != 1 {
        vec![g.iter().fold(S::zero(), |a, &v| a + v)]
    } else {
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap().with_requires_grad()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_twice_input() {
        let vals = [1.0, -2.0, 3.5];
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &vals));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap();
        for (gi, vi) in g.iter().zip(vals) {
            assert_eq!(*gi, 2.0 * vi);
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn sum_of_leaves_graph_gives_all_ones() {
        // Diamond-shaped graph: every leaf contributes exactly once through concat and reshape.
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(&[1, 2], &[5.0, 6.0]));
        let c = tape.concat(&[a, b], 0).unwrap();
        let p = tape.permute(c, &[1, 0]).unwrap();
        let r = tape.reshape(p, &[6]).unwrap();
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0; 4]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0; 2]);
    }

    #[test]
    fn constant_leaves_get_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(Tensor::new([2], vec![3.0, 4.0]).unwrap());
        let m = tape.mul(x, c).unwrap();
        let s = tape.sum(m);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn scalar_broadcast_gradient_is_summed() {
        let mut tape = Tape::new();
        let alpha = tape.leaf(t(&[1], &[2.0]));
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let m = tape.mul(alpha, x).unwrap();
        let s = tape.sum(m);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(alpha).unwrap(), &[6.0]);
        assert_eq!(tape.grad(x).unwrap(), &[2.0; 3]);
    }

    #[test]
    fn fault_injection_flips_sign() {
        let mut tape = Tape::with_fault(OpKind::Tanh);
        let x = tape.leaf(t(&[1], &[0.0]));
        let y = tape.tanh(x);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[-1.0]);
    }

    #[test]
    fn op_names_parse_back() {
        for k in OpKind::ALL {
            assert_eq!(k.as_str().parse::<OpKind>().unwrap(), k);
        }
        assert!("softmax".parse::<OpKind>().is_err());
    }
}
