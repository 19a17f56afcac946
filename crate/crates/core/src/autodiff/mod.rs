//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] is a computation record built dynamically during a forward
//! pass. Every catalog operation appends one node holding its output value;
//! [`Tape::backward`] walks the nodes in exact reverse order and accumulates
//! adjoints into every node that requires a gradient. Values that should not
//! receive gradients (features, masks, Langevin noise) enter as constants.

mod fdcheck;
mod kernels;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

pub use fdcheck::{central_difference, finite_difference_check, max_relative_error, relative_error};

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};
use kernels::Broadcast;

/// Handle to a node of a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// The operation catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Matmul,
    Add,
    ElementwiseMul,
    Concat,
    SumOverAxis,
    Sigmoid,
    Tanh,
    Relu,
    Affine,
    ScalarScale,
    Slice,
    Stack,
    Softmax,
    SoftmaxCrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 14] = [
        OpKind::Matmul,
        OpKind::Add,
        OpKind::ElementwiseMul,
        OpKind::Concat,
        OpKind::SumOverAxis,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::Affine,
        OpKind::ScalarScale,
        OpKind::Slice,
        OpKind::Stack,
        OpKind::Softmax,
        OpKind::SoftmaxCrossEntropy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul",
            OpKind::Add => "add",
            OpKind::ElementwiseMul => "elementwise_mul",
            OpKind::Concat => "concat",
            OpKind::SumOverAxis => "sum_over_axis",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Affine => "affine",
            OpKind::ScalarScale => "scalar_scale",
            OpKind::Slice => "slice",
            OpKind::Stack => "stack",
            OpKind::Softmax => "softmax",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

/// Non-tensor arguments for [`Tape::record`].
#[derive(Debug, Clone, Default)]
pub struct OpAttrs {
    pub axis: usize,
    pub start: usize,
    pub end: usize,
    pub factor: f64,
    /// Per-row class targets for `softmax_cross_entropy`; `None` rows are ignored.
    pub targets: Vec<Option<usize>>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Concat { inputs: Vec<Var>, axis: usize },
    SumAxis { input: Var, axis: usize },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Affine { x: Var, w: Var, b: Var },
    Scale { input: Var, factor: f64 },
    Slice { input: Var, axis: usize, start: usize, end: usize },
    Stack(Vec<Var>),
    Softmax(Var),
    SoftmaxCe { logits: Var, targets: Vec<Option<usize>> },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "elementwise_mul",
            Op::Concat { .. } => "concat",
            Op::SumAxis { .. } => "sum_over_axis",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Affine { .. } => "affine",
            Op::Scale { .. } => "scalar_scale",
            Op::Slice { .. } => "slice",
            Op::Stack(_) => "stack",
            Op::Softmax(_) => "softmax",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Matmul(a, b) | Op::Add(a, b, _) | Op::Mul(a, b, _) => vec![*a, *b],
            Op::Concat { inputs, .. } | Op::Stack(inputs) => inputs.clone(),
            Op::SumAxis { input, .. }
            | Op::Scale { input, .. }
            | Op::Slice { input, .. }
            | Op::Sigmoid(input)
            | Op::Tanh(input)
            | Op::Relu(input)
            | Op::Softmax(input) => vec![*input],
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::SoftmaxCe { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Adjoints keyed by node id; each gradient has its node's shape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<usize, Tensor>,
}

impl GradientMap {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v.0)
    }

    /// Gradient of `v`, or zeros of `shape` when no path reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.grads.get(&v.0).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }
}

/// A dynamic computation record.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.check_open()?;
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf input".into()));
        }
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    fn check_open(&self) -> Result<()> {
        if self.consumed {
            Err(Error::RecordConsumed)
        } else {
            Ok(())
        }
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(v.0))
        }
    }

    /// Records a catalog operation by kind.
    pub fn record(&mut self, kind: OpKind, inputs: &[Var], attrs: OpAttrs) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::Shape(format!("{} takes {n} inputs, got {}", kind.as_str(), inputs.len())))
            }
        };
        for &v in inputs {
            self.check_var(v)?;
        }
        let op = match kind {
            OpKind::Matmul => {
                arity(2)?;
                Op::Matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                arity(2)?;
                let rule = kernels::broadcast_rule(self.shape(inputs[0]), self.shape(inputs[1]))?;
                Op::Add(inputs[0], inputs[1], rule)
            }
            OpKind::ElementwiseMul => {
                arity(2)?;
                let rule = kernels::broadcast_rule(self.shape(inputs[0]), self.shape(inputs[1]))?;
                Op::Mul(inputs[0], inputs[1], rule)
            }
            OpKind::Concat => Op::Concat { inputs: inputs.to_vec(), axis: attrs.axis },
            OpKind::SumOverAxis => {
                arity(1)?;
                Op::SumAxis { input: inputs[0], axis: attrs.axis }
            }
            OpKind::Sigmoid => {
                arity(1)?;
                Op::Sigmoid(inputs[0])
            }
            OpKind::Tanh => {
                arity(1)?;
                Op::Tanh(inputs[0])
            }
            OpKind::Relu => {
                arity(1)?;
                Op::Relu(inputs[0])
            }
            OpKind::Affine => {
                arity(3)?;
                Op::Affine { x: inputs[0], w: inputs[1], b: inputs[2] }
            }
            OpKind::ScalarScale => {
                arity(1)?;
                Op::Scale { input: inputs[0], factor: attrs.factor }
            }
            OpKind::Slice => {
                arity(1)?;
                Op::Slice { input: inputs[0], axis: attrs.axis, start: attrs.start, end: attrs.end }
            }
            OpKind::Stack => Op::Stack(inputs.to_vec()),
            OpKind::Softmax => {
                arity(1)?;
                Op::Softmax(inputs[0])
            }
            OpKind::SoftmaxCrossEntropy => {
                arity(1)?;
                Op::SoftmaxCe { logits: inputs[0], targets: attrs.targets }
            }
        };
        self.push(op)
    }

    /// Records an op whose name is given as text (e.g. from a trace file).
    pub fn record_named(&mut self, name: &str, inputs: &[Var], attrs: OpAttrs) -> Result<Var> {
        let kind = OpKind::from_str(name)?;
        self.record(kind, inputs, attrs)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        self.check_open()?;
        let value = forward(&op, &self.nodes)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(op.kind().into()));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a[..., k] x b[k, n] -> [..., n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Matmul, &[a, b], OpAttrs::default())
    }

    /// Elementwise sum; `b` may broadcast onto `a` (trailing-aligned, extents equal or 1).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Add, &[a, b], OpAttrs::default())
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::ElementwiseMul, &[a, b], OpAttrs::default())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        self.record(OpKind::Concat, inputs, OpAttrs { axis, ..Default::default() })
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.record(OpKind::SumOverAxis, &[a], OpAttrs { axis, ..Default::default() })
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let mut v = a;
        while self.shape(v).len() > 1 {
            v = self.sum_axis(v, 0)?;
        }
        if self.shape(v)[0] > 1 {
            v = self.sum_axis(v, 0)?;
        }
        Ok(v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Sigmoid, &[a], OpAttrs::default())
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Tanh, &[a], OpAttrs::default())
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Relu, &[a], OpAttrs::default())
    }

    /// `x[..., k] w[k, n] + b[n]`
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Affine, &[x, w, b], OpAttrs::default())
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.record(OpKind::ScalarScale, &[a], OpAttrs { factor, ..Default::default() })
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.record(OpKind::Slice, &[a], OpAttrs { axis, start, end, ..Default::default() })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        self.record(OpKind::Stack, inputs, OpAttrs::default())
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Softmax, &[a], OpAttrs::default())
    }

    /// Mean of `-log softmax(row)[target]` over rows with a target.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Result<Var> {
        self.record(OpKind::SoftmaxCrossEntropy, &[logits], OpAttrs { targets, ..Default::default() })
    }

    /// `clamp(x, 0, 1)` expressed as `relu(x) - relu(x - 1)`.
    pub fn clamp_unit(&mut self, a: Var) -> Result<Var> {
        let shifted_bias = self.constant(Tensor::scalar(-1.0))?;
        let lower = self.relu(a)?;
        let shifted = self.add(a, shifted_bias)?;
        let upper = self.relu(shifted)?;
        self.sub(lower, upper)
    }

    /// Accumulates `d(root)/d(node)` for every node that requires a gradient.
    ///
    /// Consumes the record: later calls to `backward` or recording fail.
    pub fn backward(&mut self, root: Var) -> Result<GradientMap> {
        self.check_open()?;
        self.check_var(root)?;
        let numel_root = self.nodes[root.0].value.len();
        if numel_root != 1 {
            return Err(Error::NonScalarRoot { numel: numel_root });
        }
        self.consumed = true;
        if !self.nodes[root.0].requires_grad {
            return Ok(GradientMap::default());
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                adjoint(&node.op, &node.value, &g, &self.nodes, &mut grads);
            }
            grads[id] = Some(g);
        }

        let mut out = BTreeMap::new();
        for (id, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &self.nodes[id];
                if !node.requires_grad {
                    continue;
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {}", node.op.kind())));
                }
                out.insert(id, Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(GradientMap { grads: out })
    }

    /// Re-executes the recorded operations, substituting new leaf values.
    pub fn replay(&self, overrides: &[(Var, Tensor)]) -> Result<Tape> {
        let mut out = Tape { nodes: Vec::with_capacity(self.nodes.len()), consumed: false };
        for (id, node) in self.nodes.iter().enumerate() {
            let value = match node.op {
                Op::Leaf => match overrides.iter().find(|(v, _)| v.0 == id) {
                    Some((_, t)) => {
                        if t.shape() != node.value.shape() {
                            return Err(Error::Shape(format!(
                                "replay override for node {id}: {:?} vs {:?}",
                                t.shape(),
                                node.value.shape()
                            )));
                        }
                        t.clone()
                    }
                    None => node.value.clone(),
                },
                _ => forward(&node.op, &out.nodes)?,
            };
            if !value.is_finite() {
                return Err(Error::NonFinite(node.op.kind().into()));
            }
            out.nodes.push(Node { value, op: node.op.clone(), requires_grad: node.requires_grad });
        }
        Ok(out)
    }
}

fn shape_err(op: &str, detail: impl core::fmt::Debug) -> Error {
    Error::Shape(format!("{op}: {detail:?}"))
}

fn forward(op: &Op, nodes: &[Node]) -> Result<Tensor> {
    let val = |v: &Var| &nodes[v.0].value;
    match op {
        Op::Leaf => unreachable!("leaves are not recomputed"),
        Op::Matmul(a, b) => {
            let (a, b) = (val(a), val(b));
            let (ash, bsh) = (a.shape(), b.shape());
            if bsh.len() != 2 || ash.is_empty() || ash[ash.len() - 1] != bsh[0] {
                return Err(shape_err("matmul", (ash, bsh)));
            }
            let (k, n) = (bsh[0], bsh[1]);
            let m = a.len() / k;
            let mut out = vec![0.0; m * n];
            kernels::matmul_acc(a.data(), b.data(), &mut out, m, k, n);
            let mut shape = ash.to_vec();
            *shape.last_mut().unwrap() = n;
            Tensor::new(shape, out)
        }
        Op::Affine { x, w, b } => {
            let (x, w, b) = (val(x), val(w), val(b));
            let (xs, ws) = (x.shape(), w.shape());
            if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[0] || b.shape() != [ws[1]] {
                return Err(shape_err("affine", (xs, ws, b.shape())));
            }
            let (k, n) = (ws[0], ws[1]);
            let m = x.len() / k;
            let mut out = Vec::with_capacity(m * n);
            for _ in 0..m {
                out.extend_from_slice(b.data());
            }
            kernels::matmul_acc(x.data(), w.data(), &mut out, m, k, n);
            let mut shape = xs.to_vec();
            *shape.last_mut().unwrap() = n;
            Tensor::new(shape, out)
        }
        Op::Add(a, b, rule) | Op::Mul(a, b, rule) => {
            let (a, b) = (val(a), val(b));
            let mut out = a.data().to_vec();
            let bd = b.data();
            if matches!(op, Op::Add(..)) {
                kernels::for_each_pair(a.shape(), rule, |i, j| out[i] += bd[j]);
            } else {
                kernels::for_each_pair(a.shape(), rule, |i, j| out[i] *= bd[j]);
            }
            Tensor::new(a.shape().to_vec(), out)
        }
        Op::Concat { inputs, axis } => {
            let first = inputs.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
            let base = val(first).shape();
            if *axis >= base.len() {
                return Err(shape_err("concat axis", (axis, base)));
            }
            let mut extent = 0;
            for v in inputs {
                let s = val(v).shape();
                if s.len() != base.len()
                    || s.iter().zip(base).enumerate().any(|(i, (x, y))| i != *axis && x != y)
                {
                    return Err(shape_err("concat", (base, s)));
                }
                extent += s[*axis];
            }
            let (outer, _, inner) = kernels::split_at_axis(base, *axis);
            let mut out = Vec::with_capacity(outer * extent * inner);
            for o in 0..outer {
                for v in inputs {
                    let t = val(v);
                    let chunk = t.shape()[*axis] * inner;
                    out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = base.to_vec();
            shape[*axis] = extent;
            Tensor::new(shape, out)
        }
        Op::SumAxis { input, axis } => {
            let t = val(input);
            if *axis >= t.ndim() {
                return Err(shape_err("sum_over_axis", (axis, t.shape())));
            }
            let (outer, ext, inner) = kernels::split_at_axis(t.shape(), *axis);
            let mut out = vec![0.0; outer * inner];
            let d = t.data();
            for o in 0..outer {
                for a in 0..ext {
                    let src = &d[(o * ext + a) * inner..(o * ext + a + 1) * inner];
                    for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *dst += s;
                    }
                }
            }
            let mut shape = t.shape().to_vec();
            shape.remove(*axis);
            if shape.is_empty() {
                shape.push(1);
            }
            Tensor::new(shape, out)
        }
        Op::Sigmoid(a) => Ok(val(a).map(kernels::sigmoid)),
        Op::Tanh(a) => Ok(val(a).map(libm::tanh)),
        Op::Relu(a) => Ok(val(a).map(|x| if x > 0.0 { x } else { 0.0 })),
        Op::Scale { input, factor } => {
            let f = *factor;
            Ok(val(input).map(|x| x * f))
        }
        Op::Slice { input, axis, start, end } => {
            let t = val(input);
            if *axis >= t.ndim() || start >= end || *end > t.shape()[*axis] {
                return Err(shape_err("slice", (t.shape(), axis, start, end)));
            }
            let (outer, ext, inner) = kernels::split_at_axis(t.shape(), *axis);
            let width = (end - start) * inner;
            let mut out = Vec::with_capacity(outer * width);
            for o in 0..outer {
                let off = (o * ext + start) * inner;
                out.extend_from_slice(&t.data()[off..off + width]);
            }
            let mut shape = t.shape().to_vec();
            shape[*axis] = end - start;
            Tensor::new(shape, out)
        }
        Op::Stack(inputs) => {
            let first = inputs.first().ok_or_else(|| shape_err("stack", "no inputs"))?;
            let base = val(first).shape();
            let mut out = Vec::with_capacity(numel(base) * inputs.len());
            for v in inputs {
                let t = val(v);
                if t.shape() != base {
                    return Err(shape_err("stack", (base, t.shape())));
                }
                out.extend_from_slice(t.data());
            }
            let mut shape = vec![inputs.len()];
            shape.extend_from_slice(base);
            Tensor::new(shape, out)
        }
        Op::Softmax(a) => {
            let t = val(a);
            let c = *t.shape().last().ok_or_else(|| shape_err("softmax", t.shape()))?;
            let mut out = vec![0.0; t.len()];
            for (row, dst) in t.data().chunks(c).zip(out.chunks_mut(c)) {
                kernels::softmax_row(row, dst);
            }
            Tensor::new(t.shape().to_vec(), out)
        }
        Op::SoftmaxCe { logits, targets } => {
            let t = val(logits);
            let c = *t.shape().last().ok_or_else(|| shape_err("softmax_cross_entropy", t.shape()))?;
            let rows = t.len() / c;
            if targets.len() != rows {
                return Err(shape_err("softmax_cross_entropy targets", (rows, targets.len())));
            }
            let mut total = 0.0;
            let mut count = 0usize;
            for (row, target) in t.data().chunks(c).zip(targets) {
                if let Some(k) = *target {
                    if k >= c {
                        return Err(Error::IndexOutOfRange { what: "target class", index: k, bound: c });
                    }
                    total += kernels::neg_log_softmax(row, k);
                    count += 1;
                }
            }
            let mean = if count == 0 { 0.0 } else { total / count as f64 };
            Ok(Tensor::scalar(mean))
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    f(slot);
}

/// Pushes the adjoint `g` of one node into its inputs.
fn adjoint(op: &Op, out: &Tensor, g: &[f64], nodes: &[Node], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: &Var| &nodes[v.0].value;
    match op {
        Op::Leaf => {}
        Op::Matmul(a, b) | Op::Affine { x: a, w: b, .. } => {
            let (av, bv) = (val(a), val(b));
            let (k, n) = (bv.shape()[0], bv.shape()[1]);
            let m = av.len() / k;
            accumulate(grads, nodes, *a, |ga| kernels::matmul_grad_lhs(g, bv.data(), ga, m, k, n));
            accumulate(grads, nodes, *b, |gb| kernels::matmul_grad_rhs(av.data(), g, gb, m, k, n));
            if let Op::Affine { b: bias, .. } = op {
                accumulate(grads, nodes, *bias, |gbias| {
                    for row in g.chunks(n) {
                        for (d, s) in gbias.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                });
            }
        }
        Op::Add(a, b, rule) => {
            let a_shape = val(a).shape();
            accumulate(grads, nodes, *a, |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s));
            accumulate(grads, nodes, *b, |gb| kernels::for_each_pair(a_shape, rule, |i, j| gb[j] += g[i]));
        }
        Op::Mul(a, b, rule) => {
            let (av, bv) = (val(a), val(b));
            let (ad, bd) = (av.data(), bv.data());
            accumulate(grads, nodes, *a, |ga| kernels::for_each_pair(av.shape(), rule, |i, j| ga[i] += g[i] * bd[j]));
            accumulate(grads, nodes, *b, |gb| kernels::for_each_pair(av.shape(), rule, |i, j| gb[j] += g[i] * ad[i]));
        }
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = kernels::split_at_axis(out.shape(), *axis);
            let total = out.shape()[*axis] * inner;
            let mut offset = 0;
            for v in inputs {
                let chunk = val(v).shape()[*axis] * inner;
                accumulate(grads, nodes, *v, |gv| {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + chunk];
                        for (d, s) in gv[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
                offset += chunk;
            }
        }
        Op::SumAxis { input, axis } => {
            let (outer, ext, inner) = kernels::split_at_axis(val(input).shape(), *axis);
            accumulate(grads, nodes, *input, |gi| {
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for a in 0..ext {
                        let dst = &mut gi[(o * ext + a) * inner..(o * ext + a + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            });
        }
        Op::Sigmoid(a) => accumulate(grads, nodes, *a, |ga| {
            for ((d, s), y) in ga.iter_mut().zip(g).zip(out.data()) {
                *d += s * y * (1.0 - y);
            }
        }),
        Op::Tanh(a) => accumulate(grads, nodes, *a, |ga| {
            for ((d, s), y) in ga.iter_mut().zip(g).zip(out.data()) {
                *d += s * (1.0 - y * y);
            }
        }),
        Op::Relu(a) => {
            let x = val(a).data();
            accumulate(grads, nodes, *a, |ga| {
                for ((d, s), xv) in ga.iter_mut().zip(g).zip(x) {
                    if *xv > 0.0 {
                        *d += s;
                    }
                }
            })
        }
        Op::Scale { input, factor } => accumulate(grads, nodes, *input, |gi| {
            for (d, s) in gi.iter_mut().zip(g) {
                *d += s * factor;
            }
        }),
        Op::Slice { input, axis, start, end } => {
            let (outer, ext, inner) = kernels::split_at_axis(val(input).shape(), *axis);
            let width = (end - start) * inner;
            accumulate(grads, nodes, *input, |gi| {
                for o in 0..outer {
                    let off = (o * ext + start) * inner;
                    for (d, s) in gi[off..off + width].iter_mut().zip(&g[o * width..(o + 1) * width]) {
                        *d += s;
                    }
                }
            });
        }
        Op::Stack(inputs) => {
            let chunk = out.len() / inputs.len();
            for (k, v) in inputs.iter().enumerate() {
                accumulate(grads, nodes, *v, |gv| {
                    for (d, s) in gv.iter_mut().zip(&g[k * chunk..(k + 1) * chunk]) {
                        *d += s;
                    }
                });
            }
        }
        Op::Softmax(a) => {
            let c = *out.shape().last().unwrap();
            accumulate(grads, nodes, *a, |ga| {
                for ((gr, yr), dr) in g.chunks(c).zip(out.data().chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for ((d, gv), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += y * (gv - dot);
                    }
                }
            });
        }
        Op::SoftmaxCe { logits, targets } => {
            let t = val(logits);
            let c = *t.shape().last().unwrap();
            let count = targets.iter().filter(|t| t.is_some()).count();
            if count == 0 {
                return;
            }
            let scale = g[0] / count as f64;
            let mut probs = vec![0.0; c];
            accumulate(grads, nodes, *logits, |gl| {
                for ((row, target), dst) in t.data().chunks(c).zip(targets).zip(gl.chunks_mut(c)) {
                    let Some(k) = *target else { continue };
                    kernels::softmax_row(row, &mut probs);
                    for (j, (d, p)) in dst.iter_mut().zip(&probs).enumerate() {
                        let onehot = if j == k { 1.0 } else { 0.0 };
                        *d += scale * (p - onehot);
                    }
                }
            });
        }
    }
}
