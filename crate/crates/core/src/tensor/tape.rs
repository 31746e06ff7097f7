use std::cell::RefCell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::kernels::{axis_blocks, broadcastable, for_each_broadcast, gemm, permute_sources};
use super::{numel, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)),
            Activation::Tanh => x.tanh(),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    Permute {
        a: usize,
        sources: Vec<usize>,
    },
    Reshape {
        a: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Div {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    AddScalar {
        a: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    SumAll {
        a: usize,
    },
    MeanAll {
        a: usize,
    },
    SumAxis {
        a: usize,
        axis: usize,
    },
    MeanAxis {
        a: usize,
        axis: usize,
    },
    Log {
        a: usize,
        eps: f64,
    },
    Exp {
        a: usize,
    },
    Sqrt {
        a: usize,
    },
    Softmax {
        a: usize,
        temperature: f64,
    },
    LogSoftmax {
        a: usize,
        temperature: f64,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Activation {
        a: usize,
        kind: Activation,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Permute { .. } => "permute",
            Op::Reshape { .. } => "reshape",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Div { .. } => "div",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::SumAll { .. } => "sum",
            Op::MeanAll { .. } => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Log { .. } => "log",
            Op::Exp { .. } => "exp",
            Op::Sqrt { .. } => "sqrt",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Activation { .. } => "activation",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::Div { a, b } => {
                vec![*a, *b]
            }
            Op::Permute { a, .. }
            | Op::Reshape { a }
            | Op::Scale { a, .. }
            | Op::AddScalar { a }
            | Op::Slice { a, .. }
            | Op::SumAll { a }
            | Op::MeanAll { a }
            | Op::SumAxis { a, .. }
            | Op::MeanAxis { a, .. }
            | Op::Log { a, .. }
            | Op::Exp { a }
            | Op::Sqrt { a }
            | Op::Softmax { a, .. }
            | Op::LogSoftmax { a, .. }
            | Op::Activation { a, .. } => vec![*a],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward/backward pass.
///
/// A tape is a single-owner context: every [`Var`] borrows it, and gradients
/// computed by [`Tape::backward`] live on the tape until the next call.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("id", &self.id)
            .field("nodes", &self.nodes.borrow().len())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    /// Unique identity of this tape within the process.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf; receives a gradient in [`Tape::backward`].
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Gradient of the last backward pass with respect to `var`, if it was
    /// reachable from the loss and requires grad.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.check_owner(var);
        let grads = self.grads.borrow();
        let g = grads.get(var.id)?.as_ref()?;
        let shape = self.nodes.borrow()[var.id].value.shape().to_vec();
        Some(Tensor::from_parts(shape, g.clone()))
    }

    fn check_owner(&self, var: Var<'_>) {
        assert!(std::ptr::eq(self, var.tape), "variable belongs to a different tape");
    }

    /// Reverse pass from a scalar loss. Gradients accumulate across fan-out
    /// and replace those of any previous pass.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        self.check_owner(loss);
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let y = node.value.data();
    let val = |i: usize| &nodes[i].value;
    let wants = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let ash = av.shape();
            let bsh = bv.shape();
            let k = ash[ash.len() - 1];
            let n = bsh[bsh.len() - 1];
            if bsh.len() == 2 {
                let rows = av.len() / k;
                if wants(*a) {
                    let ga = grad_slot(grads, *a, av.len());
                    gemm(rows, n, k, g, (n, 1), bv.data(), (1, n), ga, true);
                }
                if wants(*b) {
                    let gb = grad_slot(grads, *b, bv.len());
                    gemm(k, rows, n, av.data(), (1, k), g, (n, 1), gb, true);
                }
            } else {
                let m = ash[ash.len() - 2];
                let batch = av.len() / (m * k);
                let (sa, sb, sg) = (m * k, k * n, m * n);
                if wants(*a) {
                    let ga = grad_slot(grads, *a, av.len());
                    for bi in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * sg..],
                            (n, 1),
                            &bv.data()[bi * sb..],
                            (1, n),
                            &mut ga[bi * sa..],
                            true,
                        );
                    }
                }
                if wants(*b) {
                    let gb = grad_slot(grads, *b, bv.len());
                    for bi in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &av.data()[bi * sa..],
                            (1, k),
                            &g[bi * sg..],
                            (n, 1),
                            &mut gb[bi * sb..],
                            true,
                        );
                    }
                }
            }
        }
        Op::Permute { a, sources } => {
            if wants(*a) {
                let ga = grad_slot(grads, *a, g.len());
                for (gi, &src) in g.iter().zip(sources) {
                    ga[src] += gi;
                }
            }
        }
        Op::Reshape { a } | Op::AddScalar { a } => {
            if wants(*a) {
                let ga = grad_slot(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi);
            }
        }
        Op::Add { a, b } | Op::Sub { a, b } => {
            let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
            if wants(*a) {
                let ga = grad_slot(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi);
            }
            if wants(*b) {
                let bv = val(*b);
                let gb = grad_slot(grads, *b, bv.len());
                for_each_broadcast(node.value.shape(), bv.shape(), |i, j| gb[j] += sign * g[i]);
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            if wants(*a) {
                let mut tmp = vec![0.0; av.len()];
                for_each_broadcast(av.shape(), bv.shape(), |i, j| tmp[i] = g[i] * bv.data()[j]);
                let ga = grad_slot(grads, *a, av.len());
                ga.iter_mut().zip(&tmp).for_each(|(x, t)| *x += t);
            }
            if wants(*b) {
                let gb = grad_slot(grads, *b, bv.len());
                for_each_broadcast(av.shape(), bv.shape(), |i, j| gb[j] += g[i] * av.data()[i]);
            }
        }
        Op::Div { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            if wants(*a) {
                let mut tmp = vec![0.0; av.len()];
                for_each_broadcast(av.shape(), bv.shape(), |i, j| tmp[i] = g[i] / bv.data()[j]);
                let ga = grad_slot(grads, *a, av.len());
                ga.iter_mut().zip(&tmp).for_each(|(x, t)| *x += t);
            }
            if wants(*b) {
                let gb = grad_slot(grads, *b, bv.len());
                for_each_broadcast(av.shape(), bv.shape(), |i, j| {
                    let d = bv.data()[j];
                    gb[j] -= g[i] * av.data()[i] / (d * d);
                });
            }
        }
        Op::Scale { a, factor } => {
            if wants(*a) {
                let ga = grad_slot(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, gi)| *x += factor * gi);
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = axis_blocks(node.value.shape(), *axis);
            let total_block: usize = node.value.len() / outer;
            let mut offset = 0;
            for &p in parts {
                let pv = val(p);
                let block = pv.shape()[*axis] * inner;
                if wants(p) {
                    let gp = grad_slot(grads, p, pv.len());
                    for o in 0..outer {
                        let src = &g[o * total_block + offset..o * total_block + offset + block];
                        gp[o * block..(o + 1) * block]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, s)| *x += s);
                    }
                }
                offset += block;
            }
        }
        Op::Slice { a, axis, start } => {
            if wants(*a) {
                let av = val(*a);
                let (outer, extent, inner) = axis_blocks(av.shape(), *axis);
                let len = node.value.shape()[*axis];
                let ga = grad_slot(grads, *a, av.len());
                for o in 0..outer {
                    let dst = o * extent * inner + start * inner;
                    let src = o * len * inner;
                    ga[dst..dst + len * inner]
                        .iter_mut()
                        .zip(&g[src..src + len * inner])
                        .for_each(|(x, s)| *x += s);
                }
            }
        }
        Op::Gather { table, ids } => {
            if wants(*table) {
                let tv = val(*table);
                let width = tv.shape()[1];
                let gt = grad_slot(grads, *table, tv.len());
                for (row, &id) in ids.iter().enumerate() {
                    gt[id * width..(id + 1) * width]
                        .iter_mut()
                        .zip(&g[row * width..(row + 1) * width])
                        .for_each(|(x, s)| *x += s);
                }
            }
        }
        Op::SumAll { a } | Op::MeanAll { a } => {
            if wants(*a) {
                let n = val(*a).len();
                let scale = if matches!(node.op, Op::MeanAll { .. }) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                let ga = grad_slot(grads, *a, n);
                ga.iter_mut().for_each(|x| *x += g[0] * scale);
            }
        }
        Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
            if wants(*a) {
                let av = val(*a);
                let (outer, extent, inner) = axis_blocks(av.shape(), *axis);
                let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                    1.0 / extent as f64
                } else {
                    1.0
                };
                let ga = grad_slot(grads, *a, av.len());
                for o in 0..outer {
                    for k in 0..extent {
                        let base = (o * extent + k) * inner;
                        for j in 0..inner {
                            ga[base + j] += g[o * inner + j] * scale;
                        }
                    }
                }
            }
        }
        Op::Log { a, eps } => {
            if wants(*a) {
                let x = val(*a).data();
                let ga = grad_slot(grads, *a, x.len());
                for i in 0..x.len() {
                    if x[i] > *eps {
                        ga[i] += g[i] / x[i];
                    }
                }
            }
        }
        Op::Exp { a } => {
            if wants(*a) {
                let ga = grad_slot(grads, *a, y.len());
                for i in 0..y.len() {
                    ga[i] += g[i] * y[i];
                }
            }
        }
        Op::Sqrt { a } => {
            if wants(*a) {
                let ga = grad_slot(grads, *a, y.len());
                for i in 0..y.len() {
                    ga[i] += g[i] * 0.5 / y[i];
                }
            }
        }
        Op::Softmax { a, temperature } => {
            if wants(*a) {
                let n = *node.value.shape().last().unwrap_or(&1);
                let ga = grad_slot(grads, *a, y.len());
                for r in 0..y.len() / n {
                    let row = r * n..(r + 1) * n;
                    let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                    for i in row {
                        ga[i] += y[i] * (g[i] - dot) / temperature;
                    }
                }
            }
        }
        Op::LogSoftmax { a, temperature } => {
            if wants(*a) {
                let n = *node.value.shape().last().unwrap_or(&1);
                let ga = grad_slot(grads, *a, y.len());
                for r in 0..y.len() / n {
                    let row = r * n..(r + 1) * n;
                    let total: f64 = g[row.clone()].iter().sum();
                    for i in row {
                        ga[i] += (g[i] - y[i].exp() * total) / temperature;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gv = val(*gamma).data();
            let d = gv.len();
            let rows = xhat.len() / d;
            if wants(*gamma) {
                let gg = grad_slot(grads, *gamma, d);
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if wants(*beta) {
                let gb = grad_slot(grads, *beta, d);
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
            }
            if wants(*x) {
                let gx = grad_slot(grads, *x, xhat.len());
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let base = r * d;
                    let mut sum = 0.0;
                    let mut sum_xhat = 0.0;
                    for j in 0..d {
                        dxhat[j] = g[base + j] * gv[j];
                        sum += dxhat[j];
                        sum_xhat += dxhat[j] * xhat[base + j];
                    }
                    let scale = rstd[r] / d as f64;
                    for j in 0..d {
                        gx[base + j] += scale * (d as f64 * dxhat[j] - sum - xhat[base + j] * sum_xhat);
                    }
                }
            }
        }
        Op::Activation { a, kind } => {
            if wants(*a) {
                let x = val(*a).data();
                let ga = grad_slot(grads, *a, x.len());
                for i in 0..x.len() {
                    ga[i] += g[i] * kind.derivative(x[i], y[i]);
                }
            }
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn item(&self) -> f64 {
        self.with_value(|t| t.item())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    /// A constant copy of this value; gradients stop here.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables belong to different tapes"
        );
    }

    fn unary(&self, op: impl FnOnce(usize) -> Op, f: impl FnOnce(&Tensor) -> Tensor) -> Result<Var<'t>> {
        let value = self.with_value(f);
        self.tape.push(value, op(self.id))
    }

    /// Matrix product over the last two axes. `other` is either a matrix
    /// (applied to every leading index of `self`) or has the same leading
    /// batch axes as `self`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (av, bv) = (&nodes[self.id].value, &nodes[other.id].value);
            let (ash, bsh) = (av.shape(), bv.shape());
            let err = || Error::dim("matmul", ash, bsh);
            if ash.len() < 2 || bsh.len() < 2 {
                return Err(err());
            }
            let k = ash[ash.len() - 1];
            let n = bsh[bsh.len() - 1];
            if bsh[bsh.len() - 2] != k {
                return Err(err());
            }
            let mut out_shape = ash[..ash.len() - 1].to_vec();
            out_shape.push(n);
            let mut out = vec![0.0; numel(&out_shape)];
            if bsh.len() == 2 {
                let rows = av.len() / k;
                gemm(rows, k, n, av.data(), (k, 1), bv.data(), (n, 1), &mut out, false);
            } else {
                if bsh.len() != ash.len() || bsh[..bsh.len() - 2] != ash[..ash.len() - 2] {
                    return Err(err());
                }
                let m = ash[ash.len() - 2];
                let batch = av.len() / (m * k);
                for bi in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &av.data()[bi * m * k..],
                        (k, 1),
                        &bv.data()[bi * k * n..],
                        (n, 1),
                        &mut out[bi * m * n..],
                        false,
                    );
                }
            }
            Tensor::from_parts(out_shape, out)
        };
        self.tape.push(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
        )
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Input(format!(
                "invalid permutation {perm:?} for shape {shape:?}"
            )));
        }
        let sources = permute_sources(&shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let value = self.with_value(|t| Tensor::from_parts(out_shape, sources.iter().map(|&s| t.data()[s]).collect()));
        self.tape.push(value, Op::Permute { a: self.id, sources })
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(Error::Input(format!("transpose needs rank >= 2, got {rank}")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.with_value(|t| t.clone().reshape(shape.to_vec()))?;
        self.tape.push(value, Op::Reshape { a: self.id })
    }

    fn binary(&self, other: Var<'t>, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.same_tape(&other);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (av, bv) = (&nodes[self.id].value, &nodes[other.id].value);
            if !broadcastable(av.shape(), bv.shape()) {
                return Err(Error::dim(name, av.shape(), bv.shape()));
            }
            let (ad, bd) = (av.data(), bv.data());
            let mut out = Vec::with_capacity(ad.len());
            // Indices arrive in order, so pushing fills `out` densely.
            for_each_broadcast(av.shape(), bv.shape(), |i, j| out.push(f(ad[i], bd[j])));
            Tensor::from_parts(av.shape().to_vec(), out)
        };
        self.tape.push(value, op)
    }

    /// Elementwise sum; `other` broadcasts into the shape of `self`.
    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "add",
            Op::Add {
                a: self.id,
                b: other.id,
            },
            |a, b| a + b,
        )
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "sub",
            Op::Sub {
                a: self.id,
                b: other.id,
            },
            |a, b| a - b,
        )
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "mul",
            Op::Mul {
                a: self.id,
                b: other.id,
            },
            |a, b| a * b,
        )
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "div",
            Op::Div {
                a: self.id,
                b: other.id,
            },
            |a, b| a / b,
        )
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.mul(*self)
    }

    pub fn scale(&self, factor: f64) -> Result<Var<'t>> {
        self.unary(|a| Op::Scale { a, factor }, |t| t.map(|x| x * factor))
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.unary(|a| Op::AddScalar { a }, |t| t.map(|x| x + c))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat of zero tensors".into()))?;
        let tape = first.tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let base = nodes[first.id].value.shape().to_vec();
            if axis >= base.len() {
                return Err(Error::Input(format!("concat axis {axis} out of range for {base:?}")));
            }
            let mut extent = 0;
            for p in parts {
                first.same_tape(p);
                let s = nodes[p.id].value.shape();
                let mut a = s.to_vec();
                let mut b = base.clone();
                a[axis] = 0;
                b[axis] = 0;
                if s.len() != base.len() || a != b {
                    return Err(Error::dim("concat", &base, s));
                }
                extent += s[axis];
            }
            let mut out_shape = base.clone();
            out_shape[axis] = extent;
            let (outer, _, inner) = axis_blocks(&out_shape, axis);
            let mut out = Vec::with_capacity(numel(&out_shape));
            for o in 0..outer {
                for p in parts {
                    let v = &nodes[p.id].value;
                    let block = v.shape()[axis] * inner;
                    out.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
                }
            }
            Tensor::from_parts(out_shape, out)
        };
        tape.push(
            value,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        )
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Input(format!(
                "slice [{start}, {}) on axis {axis} out of range for {shape:?}",
                start + len
            )));
        }
        let (outer, extent, inner) = axis_blocks(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let value = self.with_value(|t| {
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let from = o * extent * inner + start * inner;
                out.extend_from_slice(&t.data()[from..from + len * inner]);
            }
            Tensor::from_parts(out_shape, out)
        });
        self.tape.push(
            value,
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
        )
    }

    /// Splits along `axis` into consecutive pieces of the given extents.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Var<'t>>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(axis, start, s)?);
            start += s;
        }
        if start != self.shape()[axis] {
            return Err(Error::Input(format!("split sizes {sizes:?} do not cover axis {axis}")));
        }
        Ok(out)
    }

    /// Row lookup into a `[rows × width]` table (embedding gather).
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::Input(format!("gather_rows needs a matrix, got {shape:?}")));
        }
        if ids.is_empty() {
            return Err(Error::Input("gather_rows with no ids".into()));
        }
        let (rows, width) = (shape[0], shape[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!("row id {bad} out of range for {rows} rows")));
        }
        let value = self.with_value(|t| {
            let mut out = Vec::with_capacity(ids.len() * width);
            for &i in ids {
                out.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
            }
            Tensor::from_parts(vec![ids.len(), width], out)
        });
        self.tape.push(
            value,
            Op::Gather {
                table: self.id,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        self.unary(|a| Op::SumAll { a }, |t| Tensor::scalar(t.data().iter().sum()))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        self.unary(
            |a| Op::MeanAll { a },
            |t| Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64),
        )
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Input(format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, extent, inner) = axis_blocks(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let scale = if mean { 1.0 / extent as f64 } else { 1.0 };
        let value = self.with_value(|t| {
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for k in 0..extent {
                    let base = (o * extent + k) * inner;
                    for j in 0..inner {
                        out[o * inner + j] += t.data()[base + j];
                    }
                }
            }
            out.iter_mut().for_each(|x| *x *= scale);
            Tensor::from_parts(out_shape, out)
        });
        let op = if mean {
            Op::MeanAxis { a: self.id, axis }
        } else {
            Op::SumAxis { a: self.id, axis }
        };
        self.tape.push(value, op)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, true)
    }

    /// Natural log of `max(x, eps)`; no gradient flows through clamped entries.
    pub fn ln(&self, eps: f64) -> Result<Var<'t>> {
        self.unary(|a| Op::Log { a, eps }, |t| t.map(|x| x.max(eps).ln()))
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary(|a| Op::Exp { a }, |t| t.map(f64::exp))
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        if self.with_value(|t| t.data().iter().any(|&x| x < 0.0)) {
            return Err(Error::Input("sqrt of a negative value".into()));
        }
        self.unary(|a| Op::Sqrt { a }, |t| t.map(f64::sqrt))
    }

    fn check_temperature(temperature: f64) -> Result<()> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(())
    }

    /// Softmax of `x / temperature` over the last axis, max-subtracted.
    pub fn softmax(&self, temperature: f64) -> Result<Var<'t>> {
        Self::check_temperature(temperature)?;
        self.unary(
            |a| Op::Softmax { a, temperature },
            |t| t.map_rows(|row, out| softmax_row(row, temperature, out)),
        )
    }

    pub fn log_softmax(&self, temperature: f64) -> Result<Var<'t>> {
        Self::check_temperature(temperature)?;
        self.unary(
            |a| Op::LogSoftmax { a, temperature },
            |t| t.map_rows(|row, out| log_softmax_row(row, temperature, out)),
        )
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma * x + beta`.
    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let (value, xhat, rstd) = {
            let nodes = self.tape.nodes.borrow();
            let (xv, gv, bv) = (&nodes[self.id].value, &nodes[gamma.id].value, &nodes[beta.id].value);
            let d = *xv.shape().last().unwrap_or(&1);
            if gv.shape() != [d] || bv.shape() != [d] {
                return Err(Error::dim("layer_norm", xv.shape(), gv.shape()));
            }
            let rows = xv.len() / d;
            let mut xhat = vec![0.0; xv.len()];
            let mut rstd = vec![0.0; rows];
            let mut out = vec![0.0; xv.len()];
            for r in 0..rows {
                let row = &xv.data()[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
                let s = 1.0 / (var + eps).sqrt();
                rstd[r] = s;
                for j in 0..d {
                    let h = (row[j] - mean) * s;
                    xhat[r * d + j] = h;
                    out[r * d + j] = gv.data()[j] * h + bv.data()[j];
                }
            }
            (Tensor::from_parts(xv.shape().to_vec(), out), xhat, rstd)
        };
        self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
        )
    }

    pub fn activation(&self, kind: Activation) -> Result<Var<'t>> {
        self.unary(|a| Op::Activation { a, kind }, |t| t.map(|x| kind.apply(x)))
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.activation(Activation::Relu)
    }

    pub fn gelu(&self) -> Result<Var<'t>> {
        self.activation(Activation::Gelu)
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.activation(Activation::Tanh)
    }
}

pub(crate) fn softmax_row(row: &[f64], temperature: f64, out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = ((x - max) / temperature).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

pub(crate) fn log_softmax_row(row: &[f64], temperature: f64, out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&x| ((x - max) / temperature).exp()).sum::<f64>().ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max) / temperature - lse;
    }
}

impl Tensor {
    fn map_rows(&self, f: impl Fn(&[f64], &mut [f64])) -> Tensor {
        let n = *self.shape().last().unwrap_or(&1);
        let mut out = vec![0.0; self.len()];
        for (row, o) in self.data().chunks(n).zip(out.chunks_mut(n)) {
            f(row, o);
        }
        Tensor::from_parts(self.shape().to_vec(), out)
    }
}
