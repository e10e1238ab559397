use std::cell::RefCell;
use std::fmt;

use super::{matmul_raw, transpose_raw, Tensor};
use crate::error::{Error, Result};

/// Handle of a recorded value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    MaxSpatial { input: NodeId, argmax: Vec<usize> },
    MeanMasked { input: NodeId, weights: Vec<f64> },
    Unary(Unary, NodeId),
    Binary(Binary, NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    LogSumExp(NodeId),
    Sum(NodeId),
    Gather { input: NodeId, indices: Vec<usize> },
    Concat(Vec<NodeId>),
    AddBias(NodeId, NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::MaxSpatial { .. } => "max_over_spatial",
            Op::MeanMasked { .. } => "mean_masked",
            Op::Unary(u, _) => match u {
                Unary::Relu => "relu",
                Unary::Tanh => "tanh",
                Unary::Sigmoid => "sigmoid",
                Unary::Exp => "exp",
                Unary::Log => "log",
                Unary::Neg => "neg",
            },
            Op::Binary(b, ..) => match b {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            },
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::LogSumExp(_) => "log_sum_exp",
            Op::Sum(_) => "sum",
            Op::Gather { .. } => "gather",
            Op::Concat(_) => "concat",
            Op::AddBias(..) => "add_bias",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Binary(_, a, b) | Op::AddBias(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Unary(_, a)
            | Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::LogSumExp(a)
            | Op::Sum(a) => vec![*a],
            Op::MaxSpatial { input, .. }
            | Op::MeanMasked { input, .. }
            | Op::Gather { input, .. } => vec![*input],
            Op::Concat(ids) => ids.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations. Nodes are appended in execution order, so
/// the recording is always topologically sorted.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    corrupted: Option<&'static str>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .finish()
    }
}

/// A value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            corrupted: None,
        }
    }

    /// A tape whose backward rule for `op` is deliberately wrong. Used by the
    /// self-check to prove that gradient checking catches broken rules.
    pub fn with_corrupted_backward(op: &'static str) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            corrupted: Some(op),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn value_of(&self, id: NodeId) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id.0].value)
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|i| nodes[i.0].requires_grad)
    }

    fn record(&self, value: Tensor, op: Op) -> Var<'_> {
        let rg = self.needs_grad(&op.inputs());
        self.push(value, op, rg)
    }

    fn check_same_tape(&self, v: Var<'_>) {
        assert!(
            std::ptr::eq(self, v.tape),
            "variable belongs to a different tape"
        );
    }

    pub fn matmul<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(a);
        self.check_same_tape(b);
        let out = {
            let av = self.value_of(a.id);
            let bv = self.value_of(b.id);
            if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
                return Err(Error::Dimension {
                    op: "matmul",
                    lhs: av.shape().to_vec(),
                    rhs: bv.shape().to_vec(),
                });
            }
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            Tensor {
                shape: vec![m, n],
                data: matmul_raw(av.data(), bv.data(), m, k, n),
            }
        };
        Ok(self.record(out, Op::MatMul(a.id, b.id)))
    }

    pub fn transpose<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let av = self.value_of(a.id);
            if av.rank() != 2 {
                return Err(Error::Rank {
                    op: "transpose",
                    expected: 2,
                    shape: av.shape().to_vec(),
                });
            }
            let (r, c) = (av.shape()[0], av.shape()[1]);
            Tensor {
                shape: vec![c, r],
                data: transpose_raw(av.data(), r, c),
            }
        };
        Ok(self.record(out, Op::Transpose(a.id)))
    }

    pub fn reshape<'t>(&'t self, a: Var<'t>, shape: &[usize]) -> Result<Var<'t>> {
        let out = {
            let av = self.value_of(a.id);
            av.reshaped(shape).map_err(|_| Error::Dimension {
                op: "reshape",
                lhs: av.shape().to_vec(),
                rhs: shape.to_vec(),
            })?
        };
        Ok(self.record(out, Op::Reshape(a.id)))
    }

    /// `out[d] = max_{r,c} t[r,c,d]`. The first row-major maximum receives the
    /// whole subgradient.
    pub fn max_over_spatial<'t>(&'t self, t: Var<'t>) -> Result<Var<'t>> {
        let (out, argmax) = {
            let tv = self.value_of(t.id);
            if tv.rank() != 3 {
                return Err(Error::Rank {
                    op: "max_over_spatial",
                    expected: 3,
                    shape: tv.shape().to_vec(),
                });
            }
            let depth = tv.shape()[2];
            let positions = tv.shape()[0] * tv.shape()[1];
            let data = tv.data();
            let mut best = data[..depth].to_vec();
            let mut argmax: Vec<usize> = (0..depth).collect();
            for p in 1..positions {
                for d in 0..depth {
                    let v = data[p * depth + d];
                    if v > best[d] {
                        best[d] = v;
                        argmax[d] = p * depth + d;
                    }
                }
            }
            (Tensor::vector(best), argmax)
        };
        Ok(self.record(out, Op::MaxSpatial { input: t.id, argmax }))
    }

    /// `sum(t·mask) / sum(mask)` for a 0/1 mask.
    pub fn mean_masked<'t>(&'t self, t: Var<'t>, mask: &Tensor) -> Result<Var<'t>> {
        let (out, weights) = {
            let tv = self.value_of(t.id);
            if tv.numel() != mask.numel() {
                return Err(Error::Dimension {
                    op: "mean_masked",
                    lhs: tv.shape().to_vec(),
                    rhs: mask.shape().to_vec(),
                });
            }
            let count: f64 = mask.data().iter().filter(|&&m| m != 0.0).count() as f64;
            if count == 0.0 {
                return Err(Error::EmptyCaption);
            }
            let weights: Vec<f64> = mask
                .data()
                .iter()
                .map(|&m| if m != 0.0 { 1.0 / count } else { 0.0 })
                .collect();
            let mut total = 0.0;
            let mut valid = 0.0;
            for (&v, &m) in tv.data().iter().zip(mask.data()) {
                if m != 0.0 {
                    total += v;
                    valid += 1.0;
                }
            }
            (Tensor::scalar(total / valid), weights)
        };
        Ok(self.record(out, Op::MeanMasked { input: t.id, weights }))
    }

    fn unary<'t>(&'t self, kind: Unary, a: Var<'t>) -> Var<'t> {
        let out = {
            let av = self.value_of(a.id);
            let f: fn(f64) -> f64 = match kind {
                Unary::Relu => |x| if x > 0.0 { x } else { 0.0 },
                Unary::Tanh => f64::tanh,
                Unary::Sigmoid => |x| 1.0 / (1.0 + (-x).exp()),
                Unary::Exp => f64::exp,
                Unary::Log => f64::ln,
                Unary::Neg => |x| -x,
            };
            av.map(f)
        };
        self.record(out, Op::Unary(kind, a.id))
    }

    pub fn relu<'t>(&'t self, a: Var<'t>) -> Var<'t> {
        self.unary(Unary::Relu, a)
    }

    pub fn tanh<'t>(&'t self, a: Var<'t>) -> Var<'t> {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid<'t>(&'t self, a: Var<'t>) -> Var<'t> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn exp<'t>(&'t self, a: Var<'t>) -> Var<'t> {
        self.unary(Unary::Exp, a)
    }

    pub fn neg<'t>(&'t self, a: Var<'t>) -> Var<'t> {
        self.unary(Unary::Neg, a)
    }

    pub fn log<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>> {
        if let Some(&bad) = self.value_of(a.id).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                value: bad,
            });
        }
        Ok(self.unary(Unary::Log, a))
    }

    fn binary<'t>(&'t self, kind: Binary, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(a);
        self.check_same_tape(b);
        let out = {
            let av = self.value_of(a.id);
            let bv = self.value_of(b.id);
            let f = |x: f64, y: f64| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            };
            if av.shape() == bv.shape() {
                Tensor {
                    shape: av.shape().to_vec(),
                    data: av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
                }
            } else if bv.is_scalar() {
                let y = bv.item();
                av.map(|x| f(x, y))
            } else if av.is_scalar() {
                let x = av.item();
                bv.map(|y| f(x, y))
            } else {
                return Err(Error::Dimension {
                    op: match kind {
                        Binary::Add => "add",
                        Binary::Sub => "sub",
                        Binary::Mul => "mul",
                    },
                    lhs: av.shape().to_vec(),
                    rhs: bv.shape().to_vec(),
                });
            }
        };
        Ok(self.record(out, Op::Binary(kind, a.id, b.id)))
    }

    pub fn add<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn add_scalar<'t>(&'t self, a: Var<'t>, c: f64) -> Var<'t> {
        let out = self.value_of(a.id).map(|x| x + c);
        self.record(out, Op::AddScalar(a.id))
    }

    pub fn mul_scalar<'t>(&'t self, a: Var<'t>, c: f64) -> Var<'t> {
        let out = self.value_of(a.id).scale(c);
        self.record(out, Op::MulScalar(a.id, c))
    }

    /// `max(t) + ln Σ exp(t − max(t))` over all elements.
    pub fn log_sum_exp<'t>(&'t self, t: Var<'t>) -> Var<'t> {
        let out = Tensor::scalar(log_sum_exp_raw(self.value_of(t.id).data()));
        self.record(out, Op::LogSumExp(t.id))
    }

    pub fn sum<'t>(&'t self, t: Var<'t>) -> Var<'t> {
        let out = Tensor::scalar(self.value_of(t.id).data().iter().sum());
        self.record(out, Op::Sum(t.id))
    }

    /// `out.flat[k] = t.flat[indices[k]]`, reshaped to `shape`.
    pub fn gather<'t>(&'t self, t: Var<'t>, indices: Vec<usize>, shape: &[usize]) -> Result<Var<'t>> {
        let out = {
            let tv = self.value_of(t.id);
            if let Some(&bad) = indices.iter().find(|&&i| i >= tv.numel()) {
                return Err(Error::Index {
                    index: bad,
                    limit: tv.numel(),
                });
            }
            let data = indices.iter().map(|&i| tv.data()[i]).collect();
            Tensor::new(shape.to_vec(), data)?
        };
        Ok(self.record(out, Op::Gather { input: t.id, indices }))
    }

    /// Flat concatenation into a rank-1 tensor.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::Config("concat of zero tensors".into()));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let data: Vec<f64> = parts
                .iter()
                .flat_map(|p| nodes[p.id.0].value.data().iter().copied())
                .collect();
            Tensor::vector(data)
        };
        Ok(self.record(out, Op::Concat(parts.iter().map(|p| p.id).collect())))
    }

    /// `m[r×c] + bias[c]`, the bias repeated down every row.
    pub fn add_bias<'t>(&'t self, m: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let mv = self.value_of(m.id);
            let bv = self.value_of(bias.id);
            if mv.rank() != 2 || bv.numel() != mv.shape()[1] {
                return Err(Error::Dimension {
                    op: "add_bias",
                    lhs: mv.shape().to_vec(),
                    rhs: bv.shape().to_vec(),
                });
            }
            let cols = mv.shape()[1];
            let mut out = mv.clone();
            for row in out.data_mut().chunks_mut(cols) {
                for (o, &b) in row.iter_mut().zip(bv.data()) {
                    *o += b;
                }
            }
            out
        };
        Ok(self.record(out, Op::AddBias(m.id, bias.id)))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check_same_tape(loss);
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id.0].value;
        if root.numel() != 1 {
            return Err(Error::Rank {
                op: "backward",
                expected: 0,
                shape: root.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id.0] = Some(Tensor::full(root.shape(), 1.0));

        for idx in (0..=loss.id.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let scale = match self.corrupted {
                Some(name) if name == node.op.name() => 1.5,
                _ => 1.0,
            };
            let mut contribs = backward_rule(&nodes, node, &g);
            for (id, c) in contribs.iter_mut() {
                if !nodes[id.0].requires_grad {
                    continue;
                }
                if scale != 1.0 {
                    *c = c.scale(scale);
                }
                accumulate(&mut grads[id.0], c);
            }
            grads[idx] = Some(g);
        }

        for (idx, node) in nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Tensor>, contrib: &Tensor) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                *e += c;
            }
        }
        None => *slot = Some(contrib.clone()),
    }
}

pub(crate) fn log_sum_exp_raw(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

fn backward_rule(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(NodeId, Tensor)> {
    let val = |id: &NodeId| &nodes[id.0].value;
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let bt = transpose_raw(bv.data(), k, n);
            let at = transpose_raw(av.data(), m, k);
            let ga = Tensor {
                shape: vec![m, k],
                data: matmul_raw(g.data(), &bt, m, n, k),
            };
            let gb = Tensor {
                shape: vec![k, n],
                data: matmul_raw(&at, g.data(), k, m, n),
            };
            vec![(*a, ga), (*b, gb)]
        }
        Op::Transpose(a) => {
            let (r, c) = (val(a).shape()[0], val(a).shape()[1]);
            let data = transpose_raw(g.data(), c, r);
            vec![(*a, Tensor { shape: vec![r, c], data })]
        }
        Op::Reshape(a) => vec![(
            *a,
            Tensor {
                shape: val(a).shape().to_vec(),
                data: g.data().to_vec(),
            },
        )],
        Op::MaxSpatial { input, argmax } => {
            let mut gi = Tensor::zeros(val(input).shape());
            for (d, &pos) in argmax.iter().enumerate() {
                gi.data_mut()[pos] += g.data()[d];
            }
            vec![(*input, gi)]
        }
        Op::MeanMasked { input, weights } => {
            let gs = g.item();
            let data = weights.iter().map(|w| w * gs).collect();
            vec![(
                *input,
                Tensor {
                    shape: val(input).shape().to_vec(),
                    data,
                },
            )]
        }
        Op::Unary(kind, a) => {
            let x = val(a).data();
            let y = node.value.data();
            let data: Vec<f64> = (0..x.len())
                .map(|i| {
                    let local = match kind {
                        Unary::Relu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Tanh => 1.0 - y[i] * y[i],
                        Unary::Sigmoid => y[i] * (1.0 - y[i]),
                        Unary::Exp => y[i],
                        Unary::Log => 1.0 / x[i],
                        Unary::Neg => -1.0,
                    };
                    g.data()[i] * local
                })
                .collect();
            vec![(
                *a,
                Tensor {
                    shape: val(a).shape().to_vec(),
                    data,
                },
            )]
        }
        Op::Binary(kind, a, b) => {
            let (av, bv) = (val(a), val(b));
            let out_shape = node.value.shape();
            // local partials, elementwise over the output
            let n = node.value.numel();
            let at = |i: usize| if av.numel() == 1 { av.data()[0] } else { av.data()[i] };
            let bt = |i: usize| if bv.numel() == 1 { bv.data()[0] } else { bv.data()[i] };
            let mut da = Vec::with_capacity(n);
            let mut db = Vec::with_capacity(n);
            for i in 0..n {
                let gi = g.data()[i];
                let (pa, pb) = match kind {
                    Binary::Add => (1.0, 1.0),
                    Binary::Sub => (1.0, -1.0),
                    Binary::Mul => (bt(i), at(i)),
                };
                da.push(gi * pa);
                db.push(gi * pb);
            }
            let reduce = |full: Vec<f64>, target: &Tensor| -> Tensor {
                if target.numel() == 1 && out_shape != target.shape() {
                    Tensor::full(target.shape(), full.iter().sum())
                } else {
                    Tensor {
                        shape: target.shape().to_vec(),
                        data: full,
                    }
                }
            };
            vec![(*a, reduce(da, av)), (*b, reduce(db, bv))]
        }
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::MulScalar(a, c) => vec![(*a, g.scale(*c))],
        Op::LogSumExp(a) => {
            let lse = node.value.item();
            let gs = g.item();
            vec![(*a, val(a).map(|x| gs * (x - lse).exp()))]
        }
        Op::Sum(a) => vec![(*a, Tensor::full(val(a).shape(), g.item()))],
        Op::Gather { input, indices } => {
            let mut gi = Tensor::zeros(val(input).shape());
            for (k, &i) in indices.iter().enumerate() {
                gi.data_mut()[i] += g.data()[k];
            }
            vec![(*input, gi)]
        }
        Op::Concat(ids) => {
            let mut offset = 0;
            ids.iter()
                .map(|id| {
                    let v = val(id);
                    let n = v.numel();
                    let part = Tensor {
                        shape: v.shape().to_vec(),
                        data: g.data()[offset..offset + n].to_vec(),
                    };
                    offset += n;
                    (*id, part)
                })
                .collect()
        }
        Op::AddBias(m, bias) => {
            let cols = val(m).shape()[1];
            let mut gb = vec![0.0; cols];
            for row in g.data().chunks(cols) {
                for (acc, &v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            vec![
                (*m, g.clone()),
                (
                    *bias,
                    Tensor {
                        shape: val(bias).shape().to_vec(),
                        data: gb,
                    },
                ),
            ]
        }
    }
}

/// Result of [`Tape::backward`]: one gradient per node that was reached.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id.0).and_then(Option::as_ref)
    }

    pub fn by_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `v`'s shape when nothing reached it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

impl<'t> Var<'t> {
    pub fn id(self) -> NodeId {
        self.id
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub fn value(self) -> Tensor {
        self.tape.value_of(self.id).clone()
    }

    pub fn item(self) -> f64 {
        self.tape.value_of(self.id).item()
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.value_of(self.id).shape().to_vec()
    }

    pub fn requires_grad(self) -> bool {
        self.tape.nodes.borrow()[self.id.0].requires_grad
    }

    pub fn with_value<R>(self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.value_of(self.id))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.matmul(self, rhs)
    }

    pub fn t(self) -> Result<Var<'t>> {
        self.tape.transpose(self)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.tape.reshape(self, shape)
    }

    pub fn relu(self) -> Var<'t> {
        self.tape.relu(self)
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.tanh(self)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.sigmoid(self)
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.exp(self)
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.tape.log(self)
    }

    pub fn neg(self) -> Var<'t> {
        self.tape.neg(self)
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.add(self, rhs)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.sub(self, rhs)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.mul(self, rhs)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.tape.add_scalar(self, c)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.mul_scalar(self, c)
    }

    pub fn sum(self) -> Var<'t> {
        self.tape.sum(self)
    }

    pub fn log_sum_exp(self) -> Var<'t> {
        self.tape.log_sum_exp(self)
    }

    pub fn gather(self, indices: Vec<usize>, shape: &[usize]) -> Result<Var<'t>> {
        self.tape.gather(self, indices, shape)
    }

    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.tape.add_bias(self, bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let eye = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(eye.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn annihilating_matmul() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 2, vec![0.0, 0.0, 0.0, 1.0]).unwrap());
        assert_eq!(a.matmul(b).unwrap().value().data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = a.matmul(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn max_over_spatial_routes_to_dominant_entry() {
        let tape = Tape::new();
        let mut t = Tensor::zeros(&[2, 2, 3]);
        t.set(&[1, 0, 0], 5.0);
        let x = tape.param(t);
        let m = tape.max_over_spatial(x).unwrap();
        assert_eq!(m.value().data(), &[5.0, 0.0, 0.0]);
        let loss = m.gather(vec![0], &[]).unwrap();
        let g = tape.backward(loss).unwrap().wrt(x);
        assert_eq!(g.get(&[1, 0, 0]), 1.0);
        assert_eq!(g.data().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn max_ties_go_to_first_position() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 2, 1]));
        let loss = tape.max_over_spatial(x).unwrap().sum();
        let g = tape.backward(loss).unwrap().wrt(x);
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn masked_mean() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![2.0, 4.0, 6.0]));
        let all = Tensor::vector(vec![1.0, 1.0, 1.0]);
        let first = Tensor::vector(vec![1.0, 0.0, 0.0]);
        assert_eq!(tape.mean_masked(x, &all).unwrap().item(), 4.0);
        assert_eq!(tape.mean_masked(x, &first).unwrap().item(), 2.0);
        let none = Tensor::vector(vec![0.0, 0.0, 0.0]);
        assert!(matches!(tape.mean_masked(x, &none), Err(Error::EmptyCaption)));
    }

    #[test]
    fn elementwise_values() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(Tensor::vector(vec![0.0]));
        assert_eq!(z.exp().value().data(), &[1.0]);
        assert!(matches!(x.ln(), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn scalar_broadcasting_only() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let s = tape.constant(Tensor::scalar(3.0));
        assert_eq!(a.mul(s).unwrap().value().data(), &[3.0, 6.0]);
        assert_eq!(s.sub(a).unwrap().value().data(), &[2.0, 1.0]);
        let b = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(a.add(b).is_err());
    }

    #[test]
    fn log_sum_exp_values() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        assert!(close(a.log_sum_exp().item(), 2f64.ln(), 1e-15));
        let big = tape.constant(Tensor::vector(vec![1000.0, 1000.0]));
        assert!(close(big.log_sum_exp().item(), 1000.0 + 2f64.ln(), 1e-12));
    }

    #[test]
    fn backward_of_leaf_is_one() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        assert_eq!(tape.backward(x).unwrap().wrt(x).item(), 1.0);
    }

    #[test]
    fn backward_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let loss = x.mul(x).unwrap().sum();
        assert_eq!(tape.backward(loss).unwrap().wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Rank { .. })));
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.param(Tensor::scalar(1.0));
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let x = tape.param(Tensor::vector(vec![3.0, 4.0]));
        let loss = c.mul(x).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(x).data(), &[1.0, 2.0]);
    }
}
