//! The gradient tape: an append-only record of primitive applications.
//!
//! Nodes are created in topological order, so a reverse sweep over node
//! indices visits every consumer before its producers. Backward rules are
//! themselves expressed as primitive applications on the same tape, which
//! makes gradients differentiable whenever `create_graph` is requested.

use std::collections::HashMap;

use crate::error::{AutodiffError, Result};
use crate::kernels::{self, AxisRange};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// A primitive operation together with its static (non-tensor) arguments.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    MatMul,
    /// Batched multi-channel correlation; inputs are `(input, kernel)`.
    Conv2d { pad: (usize, usize) },
    /// Per-channel correlation; inputs are `(input, kernel)`.
    DepthwiseXcorr { pad: (usize, usize) },
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Softplus,
    /// Multiplication by a fixed constant.
    Scale(f64),
    /// Sum over axes, keeping reduced axes with extent 1.
    Sum { axes: Vec<usize> },
    /// Mean over axes, keeping reduced axes with extent 1.
    Mean { axes: Vec<usize> },
    Reshape { shape: Vec<usize> },
    Slice { range: AxisRange },
    /// Adjoint of `Slice`: scatter into zeros of the given extent.
    Embed { range: AxisRange, extent: usize },
    Concat { axis: usize },
    Broadcast { shape: Vec<usize> },
    /// Maximum along an axis, kept with extent 1.
    MaxAxis { axis: usize },
    Permute { perm: Vec<usize> },
    Flip { axes: Vec<usize> },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::MatMul => "matmul",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::DepthwiseXcorr { .. } => "depthwise_xcorr",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Softplus => "softplus",
            Primitive::Scale(_) => "scale",
            Primitive::Sum { .. } => "sum",
            Primitive::Mean { .. } => "mean",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Slice { .. } => "slice",
            Primitive::Embed { .. } => "embed",
            Primitive::Concat { .. } => "concat",
            Primitive::Broadcast { .. } => "broadcast",
            Primitive::MaxAxis { .. } => "max_axis",
            Primitive::Permute { .. } => "permute",
            Primitive::Flip { .. } => "flip",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::MatMul
            | Primitive::Conv2d { .. }
            | Primitive::DepthwiseXcorr { .. } => Some(2),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        }
    }

    /// Evaluates the primitive on concrete operands.
    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        match self.arity() {
            Some(n) if inputs.len() != n => {
                return Err(AutodiffError::BadOperand {
                    op: self.name(),
                    reason: format!("expected {n} operands, got {}", inputs.len()),
                })
            }
            None if inputs.is_empty() => {
                return Err(AutodiffError::BadOperand { op: self.name(), reason: "no operands".into() })
            }
            _ => {}
        }
        let x = inputs[0];
        match self {
            Primitive::Add => kernels::zip("add", x, inputs[1], |a, b| a + b),
            Primitive::Sub => kernels::zip("sub", x, inputs[1], |a, b| a - b),
            Primitive::Mul => kernels::zip("mul", x, inputs[1], |a, b| a * b),
            Primitive::MatMul => kernels::matmul(x, inputs[1]),
            Primitive::Conv2d { pad } => kernels::conv2d(x, inputs[1], *pad),
            Primitive::DepthwiseXcorr { pad } => kernels::depthwise_xcorr(x, inputs[1], *pad),
            Primitive::Relu => Ok(x.map(|v| v.max(0.0))),
            Primitive::Sigmoid => Ok(x.map(kernels::sigmoid)),
            Primitive::Tanh => Ok(x.map(f64::tanh)),
            Primitive::Exp => Ok(x.map(f64::exp)),
            Primitive::Log => Ok(x.map(f64::ln)),
            Primitive::Softplus => Ok(x.map(kernels::softplus)),
            Primitive::Scale(c) => Ok(x.map(|v| v * c)),
            Primitive::Sum { axes } => kernels::sum_axes(x, axes),
            Primitive::Mean { axes } => {
                let count: usize = axes.iter().map(|&a| x.shape().get(a).copied().unwrap_or(1)).product();
                Ok(kernels::sum_axes(x, axes)?.map(|v| v / count as f64))
            }
            Primitive::Reshape { shape } => x.reshaped(shape).map_err(|_| AutodiffError::Shape {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: shape.clone(),
            }),
            Primitive::Slice { range } => kernels::slice(x, *range),
            Primitive::Embed { range, extent } => kernels::embed(x, *range, *extent),
            Primitive::Concat { axis } => kernels::concat(inputs, *axis),
            Primitive::Broadcast { shape } => kernels::broadcast(x, shape),
            Primitive::MaxAxis { axis } => kernels::max_axis(x, *axis).map(|(m, _)| m),
            Primitive::Permute { perm } => kernels::permute(x, perm),
            Primitive::Flip { axes } => kernels::flip(x, axes),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    /// `None` for leaves and constants.
    primitive: Option<Primitive>,
    inputs: Vec<Var>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to a set of parameters.
///
/// Each gradient is itself a node on the tape: differentiable when the
/// backward pass ran with `create_graph`, a constant otherwise.
#[derive(Debug, Clone, Default)]
pub struct GradMap {
    entries: Vec<(Var, Var)>,
}

impl GradMap {
    pub fn get(&self, param: Var) -> Option<Var> {
        self.entries.iter().find(|(p, _)| *p == param).map(|(_, g)| *g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, Var)> + '_ {
        self.entries.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Single-owner record of a computation.
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// A constant holding the current value of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, primitive: None, inputs: Vec::new(), requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        self.nodes.get(v.0).is_some_and(|n| n.primitive.is_none())
    }

    /// Applies a primitive, recording it when any operand requires a gradient.
    pub fn apply(&mut self, primitive: Primitive, inputs: &[Var]) -> Result<Var> {
        for v in inputs {
            if v.0 >= self.nodes.len() {
                return Err(AutodiffError::UnknownNode(v.0));
            }
        }
        let value = {
            let operands: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            primitive.forward(&operands)?
        };
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, primitive: Some(primitive), inputs: inputs.to_vec(), requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, pad: (usize, usize)) -> Result<Var> {
        self.apply(Primitive::Conv2d { pad }, &[input, kernel])
    }

    pub fn depthwise_xcorr(&mut self, input: Var, kernel: Var, pad: (usize, usize)) -> Result<Var> {
        self.apply(Primitive::DepthwiseXcorr { pad }, &[input, kernel])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Softplus, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Primitive::Sum { axes: axes.to_vec() }, &[x])
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Primitive::Mean { axes: axes.to_vec() }, &[x])
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        let s = self.sum_axes(x, &axes)?;
        self.reshape(s, &[])
    }

    /// Mean of all elements as a rank-0 tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        let s = self.mean_axes(x, &axes)?;
        self.reshape(s, &[])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        self.apply(Primitive::Reshape { shape: shape.to_vec() }, &[x])
    }

    pub fn slice(&mut self, x: Var, range: AxisRange) -> Result<Var> {
        self.apply(Primitive::Slice { range }, &[x])
    }

    /// Contiguous `count` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, count: usize) -> Result<Var> {
        self.slice(x, AxisRange { axis, start, count, step: 1 })
    }

    pub fn embed(&mut self, x: Var, range: AxisRange, extent: usize) -> Result<Var> {
        self.apply(Primitive::Embed { range, extent }, &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.apply(Primitive::Concat { axis }, parts)
    }

    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        self.apply(Primitive::Broadcast { shape: shape.to_vec() }, &[x])
    }

    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::MaxAxis { axis }, &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.apply(Primitive::Permute { perm: perm.to_vec() }, &[x])
    }

    pub fn flip(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Primitive::Flip { axes: axes.to_vec() }, &[x])
    }

    /// Recomputes every recorded node from its operands and checks the
    /// stored value is reproduced bit-for-bit.
    pub fn verify_replay(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(primitive) = &node.primitive else { continue };
            let operands: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let again = primitive.forward(&operands)?;
            let identical = again.shape() == node.value.shape()
                && again.data().iter().zip(node.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !identical {
                return Err(AutodiffError::Evaluation(format!(
                    "node {i} ({}) does not replay identically",
                    primitive.name()
                )));
            }
        }
        Ok(())
    }

    /// Reverse-mode gradient of the scalar `output` with respect to `params`.
    ///
    /// Parameters are usually leaves. An intermediate node is also accepted;
    /// its gradient is the adjoint of that node, so a fast weight produced
    /// by one gradient step can be differentiated against in the next.
    ///
    /// With `create_graph` the backward computation is recorded, so the
    /// returned gradients can themselves be differentiated. Without it the
    /// intermediate adjoints are discarded and each gradient is a constant.
    pub fn backward(&mut self, output: Var, params: &[Var], create_graph: bool) -> Result<GradMap> {
        if output.0 >= self.nodes.len() {
            return Err(AutodiffError::UnknownNode(output.0));
        }
        if self.value(output).len() != 1 {
            return Err(AutodiffError::NotScalar { shape: self.shape(output).to_vec() });
        }
        for &p in params {
            if p.0 >= self.nodes.len() {
                return Err(AutodiffError::UnknownNode(p.0));
            }
        }
        let start_len = self.nodes.len();
        let saved_mode = self.grad_enabled;
        self.grad_enabled = create_graph;
        let result = self.sweep(output, params);
        self.grad_enabled = saved_mode;
        let adjoints = result?;

        let mut entries = Vec::with_capacity(params.len());
        if create_graph {
            for &p in params {
                let g = match adjoints.get(&p.0) {
                    Some(&g) => g,
                    None => {
                        let zeros = Tensor::zeros(self.shape(p));
                        self.constant(zeros)
                    }
                };
                entries.push((p, g));
            }
        } else {
            let values: Vec<Tensor> = params
                .iter()
                .map(|p| match adjoints.get(&p.0) {
                    Some(&g) => self.value(g).clone(),
                    None => Tensor::zeros(self.shape(*p)),
                })
                .collect();
            self.nodes.truncate(start_len);
            for (&p, v) in params.iter().zip(values) {
                let g = self.constant(v);
                entries.push((p, g));
            }
        }
        Ok(GradMap { entries })
    }

    fn sweep(&mut self, output: Var, params: &[Var]) -> Result<HashMap<usize, Var>> {
        let mut adjoints: HashMap<usize, Var> = HashMap::new();
        if params.is_empty() || !self.nodes[output.0].requires_grad {
            return Ok(adjoints);
        }
        let lo = params.iter().map(|p| p.0).min().unwrap_or(0);
        if lo > output.0 {
            return Ok(adjoints);
        }
        let hi = output.0;
        // Nodes that depend on some parameter through differentiable edges.
        let mut on_path = vec![false; hi + 1 - lo];
        let mut is_param = vec![false; hi + 1 - lo];
        for p in params {
            if p.0 <= hi && self.nodes[p.0].requires_grad {
                is_param[p.0 - lo] = true;
            }
        }
        for i in lo..=hi {
            let node = &self.nodes[i];
            on_path[i - lo] = is_param[i - lo]
                || (node.primitive.is_some()
                    && node.requires_grad
                    && node.inputs.iter().any(|v| v.0 >= lo && on_path[v.0 - lo]));
        }
        if !on_path[hi - lo] {
            return Ok(adjoints);
        }
        let seed = Tensor::ones(self.shape(output));
        let seed = self.constant(seed);
        adjoints.insert(hi, seed);
        for i in (lo..=hi).rev() {
            if !on_path[i - lo] || self.nodes[i].primitive.is_none() {
                continue;
            }
            let g = if is_param[i - lo] { adjoints.get(&i).copied() } else { adjoints.remove(&i) };
            let Some(g) = g else { continue };
            let inputs = self.nodes[i].inputs.clone();
            let needed: Vec<bool> = inputs.iter().map(|v| v.0 >= lo && on_path[v.0 - lo]).collect();
            let contributions = self.vjp(Var(i), g, &needed)?;
            for ((input, need), contribution) in inputs.iter().zip(&needed).zip(contributions) {
                if !need {
                    continue;
                }
                let Some(c) = contribution else { continue };
                let total = match adjoints.get(&input.0) {
                    Some(&prev) => self.add(prev, c)?,
                    None => c,
                };
                adjoints.insert(input.0, total);
            }
        }
        Ok(adjoints)
    }

    /// Vector-Jacobian products of node `out` for each operand flagged in
    /// `needed`, composed from primitives.
    fn vjp(&mut self, out: Var, g: Var, needed: &[bool]) -> Result<Vec<Option<Var>>> {
        let node = &self.nodes[out.0];
        let primitive = node.primitive.clone().expect("vjp on a leaf");
        let inputs = node.inputs.clone();
        let want = |k: usize| needed.get(k).copied().unwrap_or(false);
        let x = inputs[0];
        let grads = match primitive {
            Primitive::Add => vec![Some(g), Some(g)],
            Primitive::Sub => {
                let gb = if want(1) { Some(self.neg(g)?) } else { None };
                vec![Some(g), gb]
            }
            Primitive::Mul => {
                let ga = if want(0) { Some(self.mul(g, inputs[1])?) } else { None };
                let gb = if want(1) { Some(self.mul(g, x)?) } else { None };
                vec![ga, gb]
            }
            Primitive::MatMul => {
                let ga = if want(0) {
                    let bt = self.permute(inputs[1], &[1, 0])?;
                    Some(self.matmul(g, bt)?)
                } else {
                    None
                };
                let gb = if want(1) {
                    let at = self.permute(x, &[1, 0])?;
                    Some(self.matmul(at, g)?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            Primitive::Conv2d { pad } => {
                let kernel = inputs[1];
                let gi = if want(0) {
                    let pad_t = transposed_pad("conv2d", self.shape(kernel), pad)?;
                    let flipped = self.flip(kernel, &[2, 3])?;
                    let swapped = self.permute(flipped, &[1, 0, 2, 3])?;
                    Some(self.conv2d(g, swapped, pad_t)?)
                } else {
                    None
                };
                let gk = if want(1) {
                    let xt = self.permute(x, &[1, 0, 2, 3])?;
                    let gt = self.permute(g, &[1, 0, 2, 3])?;
                    let dk = self.conv2d(xt, gt, pad)?;
                    Some(self.permute(dk, &[1, 0, 2, 3])?)
                } else {
                    None
                };
                vec![gi, gk]
            }
            Primitive::DepthwiseXcorr { pad } => {
                let kernel = inputs[1];
                let gi = if want(0) {
                    let pad_t = transposed_pad("depthwise_xcorr", self.shape(kernel), pad)?;
                    let flipped = self.flip(kernel, &[2, 3])?;
                    Some(self.depthwise_xcorr(g, flipped, pad_t)?)
                } else {
                    None
                };
                let gk = if want(1) { Some(self.depthwise_xcorr(x, g, pad)?) } else { None };
                vec![gi, gk]
            }
            Primitive::Relu => {
                let step = self.value(x).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let step = self.constant(step);
                vec![Some(self.mul(g, step)?)]
            }
            Primitive::Sigmoid => {
                // s - s^2 = s(1 - s)
                let sq = self.mul(out, out)?;
                let d = self.sub(out, sq)?;
                vec![Some(self.mul(g, d)?)]
            }
            Primitive::Tanh => {
                let sq = self.mul(out, out)?;
                let ones = Tensor::ones(self.shape(out));
                let ones = self.constant(ones);
                let d = self.sub(ones, sq)?;
                vec![Some(self.mul(g, d)?)]
            }
            Primitive::Exp => vec![Some(self.mul(g, out)?)],
            Primitive::Log => {
                // 1/x = exp(-log x)
                let neg = self.neg(out)?;
                let recip = self.exp(neg)?;
                vec![Some(self.mul(g, recip)?)]
            }
            Primitive::Softplus => {
                let s = self.sigmoid(x)?;
                vec![Some(self.mul(g, s)?)]
            }
            Primitive::Scale(c) => vec![Some(self.scale(g, c)?)],
            Primitive::Sum { .. } => {
                let shape = self.shape(x).to_vec();
                vec![Some(self.broadcast(g, &shape)?)]
            }
            Primitive::Mean { axes } => {
                let shape = self.shape(x).to_vec();
                let count: usize = axes.iter().map(|&a| shape[a]).product();
                let b = self.broadcast(g, &shape)?;
                vec![Some(self.scale(b, 1.0 / count as f64)?)]
            }
            Primitive::Reshape { .. } => {
                let shape = self.shape(x).to_vec();
                vec![Some(self.reshape(g, &shape)?)]
            }
            Primitive::Slice { range } => {
                let extent = self.shape(x)[range.axis];
                vec![Some(self.embed(g, range, extent)?)]
            }
            Primitive::Embed { range, .. } => vec![Some(self.slice(g, range)?)],
            Primitive::Concat { axis } => {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(inputs.len());
                for (k, part) in inputs.iter().enumerate() {
                    let count = self.shape(*part)[axis];
                    grads.push(if want(k) {
                        Some(self.slice(g, AxisRange { axis, start: offset, count, step: 1 })?)
                    } else {
                        None
                    });
                    offset += count;
                }
                grads
            }
            Primitive::Broadcast { .. } => {
                let src = self.shape(x).to_vec();
                if src.is_empty() {
                    vec![Some(self.sum(g)?)]
                } else {
                    let target = self.shape(out).to_vec();
                    let axes: Vec<usize> =
                        (0..src.len()).filter(|&a| src[a] == 1 && target[a] != 1).collect();
                    let reduced = if axes.is_empty() { g } else { self.sum_axes(g, &axes)? };
                    vec![Some(reduced)]
                }
            }
            Primitive::MaxAxis { axis } => {
                let (_, indicator) = kernels::max_axis(self.value(x), axis)?;
                let indicator = self.constant(indicator);
                let shape = self.shape(x).to_vec();
                let b = self.broadcast(g, &shape)?;
                vec![Some(self.mul(b, indicator)?)]
            }
            Primitive::Permute { perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                vec![Some(self.permute(g, &inverse)?)]
            }
            Primitive::Flip { axes } => vec![Some(self.flip(g, &axes)?)],
        };
        Ok(grads)
    }
}

/// Padding of the transposed correlation that maps output adjoints back to
/// input adjoints.
fn transposed_pad(op: &'static str, kernel_shape: &[usize], pad: (usize, usize)) -> Result<(usize, usize)> {
    let (kh, kw) = (kernel_shape[2], kernel_shape[3]);
    if pad.0 >= kh || pad.1 >= kw {
        return Err(AutodiffError::BadOperand {
            op,
            reason: format!("padding {pad:?} must be smaller than kernel extent ({kh}, {kw}) to differentiate"),
        });
    }
    Ok((kh - 1 - pad.0, kw - 1 - pad.1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_example() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![1., 2.]));
        let b = tape.constant(Tensor::from_vec(vec![3., 4.]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4., 6.]);
        assert!(!tape.requires_grad(c));
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).item().unwrap(), 0.5);
    }

    #[test]
    fn shape_error_names_primitive_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![1., 2., 3.]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss, &[w], false).unwrap();
        assert_eq!(tape.value(grads.get(w).unwrap()).data(), &[2., 4., 6.]);
    }

    #[test]
    fn second_derivative_of_cube() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![2.0]));
        let sq = tape.mul(w, w).unwrap();
        let cube = tape.mul(sq, w).unwrap();
        let y = tape.sum(cube).unwrap();
        let g = tape.backward(y, &[w], true).unwrap().get(w).unwrap();
        assert_eq!(tape.value(g).data(), &[12.0]);
        let gs = tape.sum(g).unwrap();
        let h = tape.backward(gs, &[w], false).unwrap().get(w).unwrap();
        assert_eq!(tape.value(h).data(), &[12.0]);
    }

    #[test]
    fn detached_backward_leaves_no_adjoint_nodes() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![1., -2.]));
        let t = tape.tanh(w).unwrap();
        let loss = tape.sum(t).unwrap();
        let before = tape.len();
        let grads = tape.backward(loss, &[w], false).unwrap();
        assert_eq!(tape.len(), before + 1);
        assert!(!tape.requires_grad(grads.get(w).unwrap()));
    }

    #[test]
    fn backward_rejects_bad_requests() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![1., 2.]));
        let sq = tape.mul(w, w).unwrap();
        assert!(matches!(tape.backward(sq, &[w], false), Err(AutodiffError::NotScalar { .. })));
        let loss = tape.sum(sq).unwrap();
        assert!(matches!(tape.backward(loss, &[Var(999)], false), Err(AutodiffError::UnknownNode(999))));
    }

    #[test]
    fn intermediate_parameter_gets_its_adjoint() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![1.5]));
        let step = tape.scale(w, 0.5).unwrap();
        let fast = tape.sub(w, step).unwrap();
        let sq = tape.mul(fast, fast).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss, &[fast, w], false).unwrap();
        assert_eq!(tape.value(grads.get(fast).unwrap()).data(), &[1.5]);
        assert_eq!(tape.value(grads.get(w).unwrap()).data(), &[0.75]);
    }

    #[test]
    fn unrelated_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![1., 2.]));
        let v = tape.leaf(Tensor::from_vec(vec![5.]));
        let loss = tape.sum(w).unwrap();
        let grads = tape.backward(loss, &[w, v], true).unwrap();
        assert_eq!(tape.value(grads.get(v).unwrap()).data(), &[0.0]);
    }

    #[test]
    fn shared_parameter_accumulates_both_paths() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![3.0]));
        let e = tape.exp(w).unwrap();
        let s = tape.scale(w, 2.0).unwrap();
        let y = tape.add(e, s).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss, &[w], false).unwrap().get(w).unwrap();
        assert!((tape.value(g).data()[0] - (3f64.exp() + 2.0)).abs() < 1e-12);
    }
}
