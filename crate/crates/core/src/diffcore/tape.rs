//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and enough
//! bookkeeping to push gradients back to its inputs. [`Tape::backward`] walks
//! the nodes in reverse insertion order, which is a valid topological order
//! because inputs always precede outputs.

use std::cell::RefCell;
use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// User-defined differentiable operation.
///
/// `backward` receives the input values, the forward output and the incoming
/// gradient, and returns one gradient buffer per input (same length as that
/// input).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    Slice { src: usize, axis: usize, start: usize },
    Sum(usize, usize),
    Mean(usize, usize),
    SumAll(usize),
    Softmax(usize),
    LayerNorm { src: usize, inv_std: Vec<f64> },
    Relu(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    GatherRows(usize, Vec<usize>),
    ScatterAddRows(usize, Vec<usize>),
    Expand(usize),
    Custom(Vec<usize>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<usize, usize>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<usize, usize>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        let shape = self.shapes[v.id].clone();
        match &self.grads[v.id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradient for every parameter of `store`, zeros for parameters that did
    /// not take part in the pass.
    pub fn params(&self, store: &ParamStore) -> Vec<Tensor> {
        (0..store.len())
            .map(|p| match self.params.get(&p) {
                Some(&node) => match &self.grads[node] {
                    Some(g) => Tensor::new(self.shapes[node].clone(), g.clone()).expect("gradient shape"),
                    None => Tensor::zeros(&self.shapes[node]),
                },
                None => Tensor::zeros(store.get(ParamId(p)).shape()),
            })
            .collect()
    }
}

fn prod(s: &[usize]) -> usize {
    s.iter().product()
}

fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn acc(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
        None => *slot = Some(g.to_vec()),
    }
}

fn acc_with(slot: &mut Option<Vec<f64>>, n: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; n]);
    f(buf);
}

/// `c[m,n] += a[m,k] * b[k,n]`
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,k] += g[m,n] * b[k,n]^T`
fn gemm_abt_acc(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            c[i * k + p] += s;
        }
    }
}

/// `c[k,n] += a[m,k]^T * g[m,n]`
fn gemm_atb_acc(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Source offset for every destination element of a permutation.
fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n = prod(shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let off: usize = idx.iter().zip(perm).map(|(&i, &p)| i * src_strides[p]).sum();
        map.push(off);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf, e.g. an input under a gradient check.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Registers parameter `id` of `store` on this tape (once per tape).
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.params.borrow().get(&id.0) {
            return Var { tape: self, id: node };
        }
        let v = self.leaf(store.get(id).clone());
        self.params.borrow_mut().insert(id.0, v.id);
        v
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom<'t>(&'t self, inputs: &[Var<'t>], output: Tensor, op: Box<dyn CustomOp>) -> Var<'t> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let needs = self.needs(&ids);
        self.push(output, Op::Custom(ids, op), needs)
    }

    /// Populates gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.needs_grad {
                backprop(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.borrow().clone(),
        })
    }
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    let want = |i: usize| nodes[i].needs_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if want(*a) {
                acc(&mut grads[*a], g);
            }
            if want(*b) {
                let nb = val(*b).numel();
                acc_with(&mut grads[*b], nb, |buf| {
                    for (i, gv) in g.iter().enumerate() {
                        buf[i % nb] += sign * gv;
                    }
                });
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let nb = bv.len();
            if want(*a) {
                acc_with(&mut grads[*a], av.len(), |buf| {
                    for (i, gv) in g.iter().enumerate() {
                        buf[i] += gv * bv[i % nb];
                    }
                });
            }
            if want(*b) {
                acc_with(&mut grads[*b], nb, |buf| {
                    for (i, gv) in g.iter().enumerate() {
                        buf[i % nb] += gv * av[i];
                    }
                });
            }
        }
        Op::Scale(a, s) => {
            let s = *s;
            acc_with(&mut grads[*a], g.len(), |buf| {
                buf.iter_mut().zip(g).for_each(|(b, gv)| *b += s * gv)
            });
        }
        Op::MatMul(a, b) => {
            let (at, bt) = (val(*a), val(*b));
            let ash = at.shape();
            let bsh = bt.shape();
            let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
            let n = bsh[bsh.len() - 1];
            let batch = prod(&ash[..ash.len() - 2]);
            let shared = bsh.len() == 2;
            if want(*a) {
                acc_with(&mut grads[*a], at.numel(), |buf| {
                    for bi in 0..batch {
                        let boff = if shared { 0 } else { bi * k * n };
                        gemm_abt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bt.data()[boff..boff + k * n],
                            &mut buf[bi * m * k..(bi + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            if want(*b) {
                acc_with(&mut grads[*b], bt.numel(), |buf| {
                    for bi in 0..batch {
                        let boff = if shared { 0 } else { bi * k * n };
                        gemm_atb_acc(
                            &at.data()[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut buf[boff..boff + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
        }
        Op::Permute(a, perm) => {
            let map = permute_map(val(*a).shape(), perm);
            acc_with(&mut grads[*a], g.len(), |buf| {
                for (dst, &src) in map.iter().enumerate() {
                    buf[src] += g[dst];
                }
            });
        }
        Op::Reshape(a) => acc(&mut grads[*a], g),
        Op::Concat(parts, axis) => {
            let out_shape = node.value.shape();
            let outer = prod(&out_shape[..*axis]);
            let inner = prod(&out_shape[axis + 1..]);
            let total = out_shape[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let width = val(p).shape()[*axis] * inner;
                if want(p) {
                    acc_with(&mut grads[p], val(p).numel(), |buf| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + width];
                            buf[o * width..(o + 1) * width]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(b, s)| *b += s);
                        }
                    });
                }
                offset += width;
            }
        }
        Op::Slice { src, axis, start } => {
            let in_shape = val(*src).shape();
            let outer = prod(&in_shape[..*axis]);
            let inner = prod(&in_shape[axis + 1..]);
            let total = in_shape[*axis] * inner;
            let width = node.value.shape()[*axis] * inner;
            let off = start * inner;
            acc_with(&mut grads[*src], val(*src).numel(), |buf| {
                for o in 0..outer {
                    buf[o * total + off..o * total + off + width]
                        .iter_mut()
                        .zip(&g[o * width..(o + 1) * width])
                        .for_each(|(b, s)| *b += s);
                }
            });
        }
        Op::Sum(a, axis) | Op::Mean(a, axis) => {
            let in_shape = val(*a).shape();
            let outer = prod(&in_shape[..*axis]);
            let len = in_shape[*axis];
            let inner = prod(&in_shape[axis + 1..]);
            let s = if matches!(node.op, Op::Mean(..)) {
                1.0 / len as f64
            } else {
                1.0
            };
            acc_with(&mut grads[*a], val(*a).numel(), |buf| {
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            buf[(o * len + l) * inner + i] += s * g[o * inner + i];
                        }
                    }
                }
            });
        }
        Op::SumAll(a) => {
            let g0 = g[0];
            acc_with(&mut grads[*a], val(*a).numel(), |buf| {
                buf.iter_mut().for_each(|b| *b += g0)
            });
        }
        Op::Softmax(a) => {
            let y = node.value.data();
            let n = *node.value.shape().last().unwrap();
            acc_with(&mut grads[*a], y.len(), |buf| {
                for r in 0..y.len() / n {
                    let ys = &y[r * n..(r + 1) * n];
                    let gs = &g[r * n..(r + 1) * n];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        buf[r * n + j] += ys[j] * (gs[j] - dot);
                    }
                }
            });
        }
        Op::LayerNorm { src, inv_std } => {
            let y = node.value.data();
            let n = *node.value.shape().last().unwrap();
            acc_with(&mut grads[*src], y.len(), |buf| {
                for (r, &is) in inv_std.iter().enumerate() {
                    let ys = &y[r * n..(r + 1) * n];
                    let gs = &g[r * n..(r + 1) * n];
                    let mg = gs.iter().sum::<f64>() / n as f64;
                    let mgy = ys.iter().zip(gs).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        buf[r * n + j] += is * (gs[j] - mg - ys[j] * mgy);
                    }
                }
            });
        }
        Op::Relu(a) => {
            let x = val(*a).data();
            acc_with(&mut grads[*a], x.len(), |buf| {
                for i in 0..x.len() {
                    if x[i] > 0.0 {
                        buf[i] += g[i];
                    }
                }
            });
        }
        Op::Softplus(a) => {
            let x = val(*a).data();
            acc_with(&mut grads[*a], x.len(), |buf| {
                for i in 0..x.len() {
                    buf[i] += g[i] * sigmoid(x[i]);
                }
            });
        }
        Op::Exp(a) => {
            let y = node.value.data();
            acc_with(&mut grads[*a], y.len(), |buf| {
                for i in 0..y.len() {
                    buf[i] += g[i] * y[i];
                }
            });
        }
        Op::Log(a) => {
            let x = val(*a).data();
            acc_with(&mut grads[*a], x.len(), |buf| {
                for i in 0..x.len() {
                    buf[i] += g[i] / x[i];
                }
            });
        }
        Op::GatherRows(a, idx) => {
            let w = node.value.shape()[1..].iter().product::<usize>();
            acc_with(&mut grads[*a], val(*a).numel(), |buf| {
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..w {
                        buf[src * w + j] += g[r * w + j];
                    }
                }
            });
        }
        Op::ScatterAddRows(a, idx) => {
            let w = node.value.shape()[1..].iter().product::<usize>();
            acc_with(&mut grads[*a], val(*a).numel(), |buf| {
                for (r, &dst) in idx.iter().enumerate() {
                    for j in 0..w {
                        buf[r * w + j] += g[dst * w + j];
                    }
                }
            });
        }
        Op::Expand(a) => {
            let n = val(*a).numel();
            acc_with(&mut grads[*a], n, |buf| {
                for (i, gv) in g.iter().enumerate() {
                    buf[i % n] += gv;
                }
            });
        }
        Op::Custom(inputs, op) => {
            let ins: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
            let gs = op.backward(&ins, &node.value, g);
            for (&i, gi) in inputs.iter().zip(gs) {
                if want(i) {
                    acc(&mut grads[i], &gi);
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.data()[0]
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).expect("unary shape")
        };
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(value, op, needs)
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if !is_suffix(a.shape(), b.shape()) {
                return Err(Error::Dimension {
                    op: name,
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let nb = b.numel();
            let bd = b.data();
            Tensor::new(
                a.shape().to_vec(),
                a.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, bd[i % nb]))
                    .collect(),
            )
            .expect("binary shape")
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, op, needs))
    }

    /// Elementwise sum; `other` may match a trailing suffix of `self`'s shape.
    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(|x| s * x, Op::Scale(self.id, s))
    }

    /// Adds a constant; the offset does not take part in differentiation.
    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(|x| x + c, Op::Scale(self.id, 1.0))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(softplus, Op::Softplus(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn log(&self) -> Var<'t> {
        self.unary(f64::ln, Op::Log(self.id))
    }

    /// `[.., m, k] x [k, n]` (shared right operand) or `[B.., m, k] x [B.., k, n]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let (ash, bsh) = (a.shape(), b.shape());
            let dim_err = || Error::Dimension {
                op: "matmul",
                lhs: ash.to_vec(),
                rhs: bsh.to_vec(),
            };
            if ash.len() < 2 || bsh.len() < 2 {
                return Err(dim_err());
            }
            let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
            let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
            let lead = &ash[..ash.len() - 2];
            let shared = bsh.len() == 2;
            if k != kb || (!shared && bsh[..bsh.len() - 2] != *lead) {
                return Err(dim_err());
            }
            let batch = prod(lead);
            let mut out = vec![0.0; batch * m * n];
            for bi in 0..batch {
                let boff = if shared { 0 } else { bi * k * n };
                gemm_acc(
                    &a.data()[bi * m * k..(bi + 1) * m * k],
                    &b.data()[boff..boff + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            let mut shape = lead.to_vec();
            shape.extend([m, n]);
            Tensor::new(shape, out).expect("matmul shape")
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), needs))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let mut seen = perm.to_vec();
            seen.sort_unstable();
            if perm.len() != x.ndim() || seen.iter().enumerate().any(|(i, &p)| i != p) {
                return Err(Error::Dimension {
                    op: "permute",
                    lhs: x.shape().to_vec(),
                    rhs: perm.to_vec(),
                });
            }
            let map = permute_map(x.shape(), perm);
            let shape = perm.iter().map(|&p| x.shape()[p]).collect();
            Tensor::new(shape, map.iter().map(|&s| x.data()[s]).collect()).expect("permute")
        };
        let needs = self.tape.needs(&[self.id]);
        Ok(self.tape.push(value, Op::Permute(self.id, perm.to_vec()), needs))
    }

    pub fn swap_axes(&self, i: usize, j: usize) -> Result<Var<'t>> {
        let mut perm: Vec<usize> = (0..self.shape().len()).collect();
        if i >= perm.len() || j >= perm.len() {
            return Err(Error::Dimension {
                op: "swap_axes",
                lhs: self.shape(),
                rhs: vec![i, j],
            });
        }
        perm.swap(i, j);
        self.permute(&perm)
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let n = self.shape().len();
        if n < 2 {
            return Err(Error::Dimension {
                op: "transpose",
                lhs: self.shape(),
                rhs: vec![],
            });
        }
        self.swap_axes(n - 2, n - 1)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        let needs = self.tape.needs(&[self.id]);
        Ok(self.tape.push(value, Op::Reshape(self.id), needs))
    }

    /// Concatenates along `axis`; every other extent must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let tape = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?
            .tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let first = nodes[parts[0].id].value.shape().to_vec();
            if axis >= first.len() {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: first,
                    rhs: vec![axis],
                });
            }
            let mut total_axis = 0;
            for p in parts {
                let s = nodes[p.id].value.shape();
                if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..]
                {
                    return Err(Error::Dimension {
                        op: "concat",
                        lhs: first,
                        rhs: s.to_vec(),
                    });
                }
                total_axis += s[axis];
            }
            let outer = prod(&first[..axis]);
            let inner = prod(&first[axis + 1..]);
            let mut out = Vec::with_capacity(outer * total_axis * inner);
            for o in 0..outer {
                for p in parts {
                    let t = &nodes[p.id].value;
                    let w = t.shape()[axis] * inner;
                    out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
                }
            }
            let mut shape = first;
            shape[axis] = total_axis;
            Tensor::new(shape, out).expect("concat shape")
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = tape.needs(&ids);
        Ok(tape.push(value, Op::Concat(ids, axis), needs))
    }

    pub fn concat_last(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let axis = parts
            .first()
            .map(|p| p.shape().len().saturating_sub(1))
            .unwrap_or(0);
        Var::concat(parts, axis)
    }

    /// Keeps `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let s = x.shape();
            if axis >= s.len() || start > end || end > s[axis] {
                return Err(Error::Dimension {
                    op: "slice",
                    lhs: s.to_vec(),
                    rhs: vec![axis, start, end],
                });
            }
            let outer = prod(&s[..axis]);
            let inner = prod(&s[axis + 1..]);
            let total = s[axis] * inner;
            let mut out = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                out.extend_from_slice(&x.data()[o * total + start * inner..o * total + end * inner]);
            }
            let mut shape = s.to_vec();
            shape[axis] = end - start;
            Tensor::new(shape, out).expect("slice shape")
        };
        let needs = self.tape.needs(&[self.id]);
        Ok(self.tape.push(
            value,
            Op::Slice {
                src: self.id,
                axis,
                start,
            },
            needs,
        ))
    }

    fn reduce(&self, axis: usize, mean: bool) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let s = x.shape();
            if axis >= s.len() {
                return Err(Error::Dimension {
                    op: if mean { "mean" } else { "sum" },
                    lhs: s.to_vec(),
                    rhs: vec![axis],
                });
            }
            let outer = prod(&s[..axis]);
            let len = s[axis];
            let inner = prod(&s[axis + 1..]);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += x.data()[(o * len + l) * inner + i];
                    }
                }
            }
            if mean {
                out.iter_mut().for_each(|v| *v /= len as f64);
            }
            let mut shape = s.to_vec();
            shape.remove(axis);
            Tensor::new(shape, out).expect("reduce shape")
        };
        let needs = self.tape.needs(&[self.id]);
        let op = if mean {
            Op::Mean(self.id, axis)
        } else {
            Op::Sum(self.id, axis)
        };
        Ok(self.tape.push(value, op, needs))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce(axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce(axis, true)
    }

    pub fn sum_all(&self) -> Var<'t> {
        let v = self.value().data().iter().sum::<f64>();
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(Tensor::scalar(v), Op::SumAll(self.id), needs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let n = *x.shape().last().unwrap_or(&1);
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(n.max(1)) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                row.iter_mut().for_each(|v| *v /= z);
            }
            Tensor::new(x.shape().to_vec(), out).expect("softmax")
        };
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(value, Op::Softmax(self.id), needs)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&self) -> Var<'t> {
        let (value, inv_std) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let n = *x.shape().last().unwrap_or(&1);
            let mut out = x.data().to_vec();
            let mut inv = Vec::with_capacity(out.len() / n.max(1));
            for row in out.chunks_mut(n.max(1)) {
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + LN_EPS).sqrt();
                row.iter_mut().for_each(|v| *v = (*v - mean) * is);
                inv.push(is);
            }
            (Tensor::new(x.shape().to_vec(), out).expect("ln"), inv)
        };
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(
            value,
            Op::LayerNorm {
                src: self.id,
                inv_std,
            },
            needs,
        )
    }

    /// Rows `idx` of a `[n, ..]` tensor.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let s = x.shape();
            if s.is_empty() || idx.iter().any(|&i| i >= s[0]) {
                return Err(Error::Dimension {
                    op: "gather_rows",
                    lhs: s.to_vec(),
                    rhs: idx.to_vec(),
                });
            }
            let w = prod(&s[1..]);
            let mut out = Vec::with_capacity(idx.len() * w);
            for &i in idx {
                out.extend_from_slice(&x.data()[i * w..(i + 1) * w]);
            }
            let mut shape = s.to_vec();
            shape[0] = idx.len();
            Tensor::new(shape, out).expect("gather")
        };
        let needs = self.tape.needs(&[self.id]);
        Ok(self
            .tape
            .push(value, Op::GatherRows(self.id, idx.to_vec()), needs))
    }

    /// Output row `idx[r]` accumulates input row `r`; output has `n_rows` rows.
    pub fn scatter_add_rows(&self, idx: &[usize], n_rows: usize) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let s = x.shape();
            if s.is_empty() || s[0] != idx.len() || idx.iter().any(|&i| i >= n_rows) {
                return Err(Error::Dimension {
                    op: "scatter_add_rows",
                    lhs: s.to_vec(),
                    rhs: idx.to_vec(),
                });
            }
            let w = prod(&s[1..]);
            let mut out = vec![0.0; n_rows * w];
            for (r, &d) in idx.iter().enumerate() {
                for j in 0..w {
                    out[d * w + j] += x.data()[r * w + j];
                }
            }
            let mut shape = s.to_vec();
            shape[0] = n_rows;
            Tensor::new(shape, out).expect("scatter")
        };
        let needs = self.tape.needs(&[self.id]);
        Ok(self
            .tape
            .push(value, Op::ScatterAddRows(self.id, idx.to_vec()), needs))
    }

    /// Repeats the tensor `n` times along a new leading axis.
    pub fn expand(&self, n: usize) -> Var<'t> {
        let x = self.value();
        let mut shape = vec![n];
        shape.extend_from_slice(x.shape());
        let mut data = Vec::with_capacity(n * x.numel());
        for _ in 0..n {
            data.extend_from_slice(x.data());
        }
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(
            Tensor::new(shape, data).expect("expand"),
            Op::Expand(self.id),
            needs,
        )
    }
}
