//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive applied to its variables in creation
//! order, which is already a valid topological order. [`Graph::backward`]
//! walks the tape once in reverse and returns gradients for the parameters
//! the loss depends on. Parameter values are borrowed from a [`ParamStore`],
//! never copied onto the tape.

use super::linalg::{gemm, View};
use super::params::{Grads, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{ensure, MindError, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Relu(Var),
    Silu(Var),
    Tanh(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var),
    Permute { a: Var, perm: Vec<usize> },
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Broadcast { a: Var, axis: usize },
    Gather { table: Var, ids: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    Mse(Var, Var),
    BceLogits { logits: Var, targets: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::ScaleBy(..) => "scale_by",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Relu(_) => "relu",
            Op::Silu(_) => "silu",
            Op::Tanh(_) => "tanh",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(_) => "softmax",
            Op::Permute { .. } => "permute",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Broadcast { .. } => "broadcast",
            Op::Gather { .. } => "gather",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumSquares(_) => "sum_squares",
            Op::Mse(..) => "mse",
            Op::BceLogits { .. } => "bce_logits",
        }
    }
}

#[derive(Debug)]
struct Node {
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    track: bool,
    param_vars: Vec<Option<Var>>,
}

const LN_EPS: f64 = 1e-5;

fn suffix_of(outer: &[usize], inner: &[usize]) -> bool {
    inner.len() <= outer.len() && outer[outer.len() - inner.len()..] == *inner
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

/// Moves axes of row-major `data` so output axis `i` is input axis `perm[i]`.
fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let last = rank - 1;
    let (last_len, last_stride) = (out_shape[last], strides[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        for j in 0..last_len {
            out.push(data[base + j * last_stride]);
        }
        // advance the multi-index over all axes but the last
        let mut ax = last;
        loop {
            if ax == 0 {
                return (out, out_shape);
            }
            ax -= 1;
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn acc(slot: &mut Option<Vec<f64>>, n: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; n]);
    f(buf);
}

impl<'p> Graph<'p> {
    /// Graph that records gradients for parameters of `params`.
    pub fn new(params: &'p ParamStore) -> Self {
        Self::build(Some(params), true)
    }

    /// Graph for evaluation only; `backward` finds nothing to differentiate.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self::build(Some(params), false)
    }

    /// Graph without parameters, for arithmetic on constants.
    pub fn detached() -> Graph<'static> {
        Graph::build(None, false)
    }

    fn build(params: Option<&'p ParamStore>, track: bool) -> Self {
        let n = params.map_or(0, ParamStore::len);
        Self { params, nodes: Vec::with_capacity(256), track, param_vars: vec![None; n] }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.expect("parameter node without store").get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value: Some(value), op: Op::Constant, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad: self.track });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Identity in the forward pass that blocks all gradient flow.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        ensure!(suffix_of(sa, sb), "cannot broadcast {sb:?} onto {sa:?}");
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let inner = bv.len();
        let data: Vec<f64> = if mul {
            av.chunks_exact(inner).flat_map(|c| c.iter().zip(bv).map(|(x, y)| x * y)).collect()
        } else {
            av.chunks_exact(inner).flat_map(|c| c.iter().zip(bv).map(|(x, y)| x + y)).collect()
        };
        let out = Tensor::from_parts(sa.to_vec(), data);
        let op = if mul { Op::Mul(a, b) } else { Op::Add(a, b) };
        Ok(self.push(out, op, &[a, b]))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias-style broadcast).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, false)
    }

    /// `a ⊙ b` with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, true)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        ensure!(self.value(s).numel() == 1, "scale_by needs a one-element scale, got {:?}", self.shape(s));
        let k = self.value(s).item();
        let out = self.value(a).map(|x| x * k);
        Ok(self.push(out, Op::ScaleBy(a, s), &[a, s]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    /// `a[..., k] · b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        ensure!(sb.len() == 2, "matmul right operand must be 2-D, got {sb:?}");
        let k = *sa.last().unwrap();
        ensure!(sb[0] == k, "matmul inner dims differ: {sa:?} x {sb:?}");
        let n = sb[1];
        let rows = self.value(a).numel() / k;
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut c = vec![0.0; rows * n];
        gemm(
            rows,
            k,
            n,
            1.0,
            self.value(a).data(),
            View::row_major(k),
            self.value(b).data(),
            View::row_major(n),
            0.0,
            &mut c,
            View::row_major(n),
        );
        let out = Tensor::from_parts(out_shape, c);
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product over a leading group axis, `op(a)[g] · op(b)[g]`, where
    /// `ta`/`tb` read the stored `[G, r, c]` blocks transposed.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        ensure!(sa.len() == 3 && sb.len() == 3, "bmm needs 3-D operands, got {sa:?} and {sb:?}");
        ensure!(sa[0] == sb[0], "bmm group counts differ: {sa:?} vs {sb:?}");
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        ensure!(k == k2, "bmm inner dims differ: {sa:?} x {sb:?} (ta={ta}, tb={tb})");
        let g = sa[0];
        let av = if ta { View::transposed(m) } else { View::row_major(k) };
        let bv = if tb { View::transposed(k) } else { View::row_major(n) };
        let mut c = vec![0.0; g * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                1.0,
                &ad[i * m * k..(i + 1) * m * k],
                av,
                &bd[i * k * n..(i + 1) * k * n],
                bv,
                0.0,
                &mut c[i * m * n..(i + 1) * m * n],
                View::row_major(n),
            );
        }
        let out = Tensor::from_parts(vec![g, m, n], c);
        Ok(self.push(out, Op::Bmm { a, b, ta, tb }, &[a, b]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        ensure!(
            self.shape(gamma) == [d] && self.shape(beta) == [d],
            "layer_norm affine params must be [{d}], got {:?} and {:?}",
            self.shape(gamma),
            self.shape(beta)
        );
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks_exact(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        let out = Tensor::from_parts(self.shape(x).to_vec(), out);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let d = *self.shape(a).last().unwrap();
        let mut out = Vec::with_capacity(self.value(a).numel());
        for row in self.value(a).data().chunks_exact(d) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut z = 0.0;
            for v in row {
                let e = (v - m).exp();
                z += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e /= z);
        }
        let out = Tensor::from_parts(self.shape(a).to_vec(), out);
        self.push(out, Op::Softmax(a), &[a])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        ensure!(perm.len() == shape.len(), "permutation {perm:?} does not match rank of {shape:?}");
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            ensure!(p < perm.len() && !seen[p], "invalid permutation {perm:?}");
            seen[p] = true;
        }
        let (data, out_shape) = permute_data(self.value(a).data(), &shape, perm);
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.push(out, Op::Permute { a, perm: perm.to_vec() }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        ensure!(!parts.is_empty(), "concat of zero tensors");
        let first = self.shape(parts[0]).to_vec();
        ensure!(axis < first.len(), "concat axis {axis} out of range for {first:?}");
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            ensure!(
                s.len() == first.len()
                    && s[..axis] == first[..axis]
                    && s[axis + 1..] == first[axis + 1..],
                "concat shapes {s:?} and {first:?} differ off axis {axis}"
            );
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        ensure!(axis < shape.len(), "slice axis {axis} out of range for {shape:?}");
        ensure!(len >= 1 && start + len <= shape[axis], "slice {start}..{} out of range for {shape:?}", start + len);
        let (outer, inner) = outer_inner(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.push(out, Op::Slice { a, axis, start }, &[a]))
    }

    /// Repeats a size-1 axis `n` times.
    pub fn broadcast(&mut self, a: Var, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        ensure!(axis < shape.len() && shape[axis] == 1, "broadcast axis {axis} of {shape:?} must have size 1");
        let (outer, inner) = outer_inner(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                data.extend_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = n;
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.push(out, Op::Broadcast { a, axis }, &[a]))
    }

    /// Row lookup into a `[rows, d]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        ensure!(shape.len() == 2, "gather table must be 2-D, got {shape:?}");
        ensure!(!ids.is_empty(), "gather with no ids");
        let d = shape[1];
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            ensure!(i < shape[0], "gather id {i} out of range for table of {} rows", shape[0]);
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::from_parts(vec![ids.len(), d], data);
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(out, Op::Mean(a), &[a])
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sq_norm());
        self.push(out, Op::SumSquares(a), &[a])
    }

    /// Mean squared difference of two same-shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ensure!(ta.shape() == tb.shape(), "mse shape mismatch {:?} vs {:?}", ta.shape(), tb.shape());
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let out = Tensor::scalar(s / ta.numel() as f64);
        Ok(self.push(out, Op::Mse(a, b), &[a, b]))
    }

    /// Mean binary cross-entropy of `logits` against 0/1 `targets`.
    pub fn bce_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let l = self.value(logits).data();
        ensure!(l.len() == targets.len(), "bce: {} logits vs {} targets", l.len(), targets.len());
        let s: f64 = l
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(0.0) - t * x + (-x.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(s / l.len() as f64);
        Ok(self.push(out, Op::BceLogits { logits, targets: targets.to_vec() }, &[logits]))
    }

    /// Gradients of the scalar `loss` with respect to every parameter it reaches.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        ensure!(
            self.value(loss).numel() == 1,
            "loss must be a scalar, got shape {:?}",
            self.shape(loss)
        );
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if !self.value(Var(i)).is_finite() {
                return Err(MindError::Numeric { node: i, op: node.op.name() });
            }
        }
        let n_params = self.params.map_or(0, ParamStore::len);
        let mut param_grads: Vec<Option<Tensor>> = vec![None; n_params];
        if !self.nodes[loss.0].needs_grad {
            return Ok(Grads::new(param_grads));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let ng = |v: Var| self.nodes[v.0].needs_grad;
            let numel = |v: Var| self.value(v).numel();
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let shape = self.value(Var(i)).shape().to_vec();
                    param_grads[id.0] = Some(Tensor::from_parts(shape, g));
                }
                Op::Add(a, b) => {
                    if ng(*a) {
                        acc(&mut grads[a.0], g.len(), |d| d.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    }
                    if ng(*b) {
                        let inner = numel(*b);
                        acc(&mut grads[b.0], inner, |d| {
                            for c in g.chunks_exact(inner) {
                                d.iter_mut().zip(c).for_each(|(x, y)| *x += y);
                            }
                        });
                    }
                }
                Op::Sub(a, b) => {
                    if ng(*a) {
                        acc(&mut grads[a.0], g.len(), |d| d.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    }
                    if ng(*b) {
                        acc(&mut grads[b.0], g.len(), |d| d.iter_mut().zip(&g).for_each(|(x, y)| *x -= y));
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let inner = bv.len();
                    if ng(*a) {
                        acc(&mut grads[a.0], g.len(), |d| {
                            for (j, (x, y)) in d.iter_mut().zip(&g).enumerate() {
                                *x += y * bv[j % inner];
                            }
                        });
                    }
                    if ng(*b) {
                        acc(&mut grads[b.0], inner, |d| {
                            for (gc, ac) in g.chunks_exact(inner).zip(av.chunks_exact(inner)) {
                                for j in 0..inner {
                                    d[j] += gc[j] * ac[j];
                                }
                            }
                        });
                    }
                }
                Op::ScaleBy(a, s) => {
                    let k = self.value(*s).item();
                    if ng(*a) {
                        acc(&mut grads[a.0], g.len(), |d| d.iter_mut().zip(&g).for_each(|(x, y)| *x += y * k));
                    }
                    if ng(*s) {
                        let dot: f64 = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum();
                        acc(&mut grads[s.0], 1, |d| d[0] += dot);
                    }
                }
                Op::Scale(a, f) => {
                    acc(&mut grads[a.0], g.len(), |d| d.iter_mut().zip(&g).for_each(|(x, y)| *x += y * f));
                }
                Op::MatMul(a, b) => {
                    let sb = self.shape(*b);
                    let (k, n) = (sb[0], sb[1]);
                    let rows = g.len() / n;
                    if ng(*a) {
                        let bv = self.value(*b).data();
                        acc(&mut grads[a.0], rows * k, |d| {
                            gemm(rows, n, k, 1.0, &g, View::row_major(n), bv, View::transposed(n), 1.0, d, View::row_major(k));
                        });
                    }
                    if ng(*b) {
                        let av = self.value(*a).data();
                        acc(&mut grads[b.0], k * n, |d| {
                            gemm(k, rows, n, 1.0, av, View::transposed(k), &g, View::row_major(n), 1.0, d, View::row_major(n));
                        });
                    }
                }
                Op::Bmm { a, b, ta, tb } => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let groups = sa[0];
                    let (m, k) = if *ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                    let n = if *tb { sb[1] } else { sb[2] };
                    let av = if *ta { View::transposed(m) } else { View::row_major(k) };
                    let bv = if *tb { View::transposed(k) } else { View::row_major(n) };
                    let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                    if ng(*a) {
                        acc(&mut grads[a.0], groups * m * k, |d| {
                            for i in 0..groups {
                                // d op(a) = g · op(b)^T, written through a's storage layout
                                gemm(
                                    m,
                                    n,
                                    k,
                                    1.0,
                                    &g[i * m * n..(i + 1) * m * n],
                                    View::row_major(n),
                                    &bd[i * k * n..(i + 1) * k * n],
                                    bv.t(),
                                    1.0,
                                    &mut d[i * m * k..(i + 1) * m * k],
                                    av,
                                );
                            }
                        });
                    }
                    if ng(*b) {
                        acc(&mut grads[b.0], groups * k * n, |d| {
                            for i in 0..groups {
                                gemm(
                                    k,
                                    m,
                                    n,
                                    1.0,
                                    &ad[i * m * k..(i + 1) * m * k],
                                    av.t(),
                                    &g[i * m * n..(i + 1) * m * n],
                                    View::row_major(n),
                                    1.0,
                                    &mut d[i * k * n..(i + 1) * k * n],
                                    bv,
                                );
                            }
                        });
                    }
                }
                Op::Relu(a) => {
                    let av = self.value(*a).data();
                    acc(&mut grads[a.0], g.len(), |d| {
                        for j in 0..g.len() {
                            if av[j] > 0.0 {
                                d[j] += g[j];
                            }
                        }
                    });
                }
                Op::Silu(a) => {
                    let av = self.value(*a).data();
                    acc(&mut grads[a.0], g.len(), |d| {
                        for j in 0..g.len() {
                            let s = sigmoid(av[j]);
                            d[j] += g[j] * s * (1.0 + av[j] * (1.0 - s));
                        }
                    });
                }
                Op::Tanh(a) => {
                    let yv = self.value(Var(i)).data();
                    acc(&mut grads[a.0], g.len(), |d| {
                        for j in 0..g.len() {
                            d[j] += g[j] * (1.0 - yv[j] * yv[j]);
                        }
                    });
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let dim = numel(*gamma);
                    let gv = self.value(*gamma).data();
                    if ng(*gamma) {
                        acc(&mut grads[gamma.0], dim, |d| {
                            for (gc, hc) in g.chunks_exact(dim).zip(xhat.chunks_exact(dim)) {
                                for j in 0..dim {
                                    d[j] += gc[j] * hc[j];
                                }
                            }
                        });
                    }
                    if ng(*beta) {
                        acc(&mut grads[beta.0], dim, |d| {
                            for gc in g.chunks_exact(dim) {
                                d.iter_mut().zip(gc).for_each(|(x, y)| *x += y);
                            }
                        });
                    }
                    if ng(*x) {
                        acc(&mut grads[x.0], g.len(), |d| {
                            let mut dh = vec![0.0; dim];
                            for (r, ((gc, hc), dc)) in g
                                .chunks_exact(dim)
                                .zip(xhat.chunks_exact(dim))
                                .zip(d.chunks_exact_mut(dim))
                                .enumerate()
                            {
                                let mut s1 = 0.0;
                                let mut s2 = 0.0;
                                for j in 0..dim {
                                    dh[j] = gc[j] * gv[j];
                                    s1 += dh[j];
                                    s2 += dh[j] * hc[j];
                                }
                                let k = rstd[r] / dim as f64;
                                for j in 0..dim {
                                    dc[j] += k * (dim as f64 * dh[j] - s1 - hc[j] * s2);
                                }
                            }
                        });
                    }
                }
                Op::Softmax(a) => {
                    let y = self.value(Var(i));
                    let dim = *y.shape().last().unwrap();
                    let yv = y.data();
                    acc(&mut grads[a.0], g.len(), |d| {
                        for ((gc, yc), dc) in g.chunks_exact(dim).zip(yv.chunks_exact(dim)).zip(d.chunks_exact_mut(dim)) {
                            let dot: f64 = gc.iter().zip(yc).map(|(x, y)| x * y).sum();
                            for j in 0..dim {
                                dc[j] += yc[j] * (gc[j] - dot);
                            }
                        }
                    });
                }
                Op::Permute { a, perm } => {
                    let out_shape = self.shape(Var(i));
                    let (back, _) = permute_data(&g, out_shape, &inverse_perm(perm));
                    acc(&mut grads[a.0], g.len(), |d| d.iter_mut().zip(&back).for_each(|(x, y)| *x += y));
                }
                Op::Reshape(a) => {
                    acc(&mut grads[a.0], g.len(), |d| d.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                }
                Op::Concat { parts, axis } => {
                    let out_shape = self.shape(Var(i));
                    let (outer, inner) = outer_inner(out_shape, *axis);
                    let total = out_shape[*axis];
                    let mut offset = 0;
                    for p in parts {
                        let len = self.shape(*p)[*axis];
                        if ng(*p) {
                            acc(&mut grads[p.0], outer * len * inner, |d| {
                                for o in 0..outer {
                                    let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                                    d[o * len * inner..(o + 1) * len * inner]
                                        .iter_mut()
                                        .zip(src)
                                        .for_each(|(x, y)| *x += y);
                                }
                            });
                        }
                        offset += len;
                    }
                }
                Op::Slice { a, axis, start } => {
                    let in_shape = self.shape(*a);
                    let (outer, inner) = outer_inner(in_shape, *axis);
                    let full = in_shape[*axis];
                    let len = self.shape(Var(i))[*axis];
                    acc(&mut grads[a.0], outer * full * inner, |d| {
                        for o in 0..outer {
                            let base = (o * full + start) * inner;
                            d[base..base + len * inner]
                                .iter_mut()
                                .zip(&g[o * len * inner..(o + 1) * len * inner])
                                .for_each(|(x, y)| *x += y);
                        }
                    });
                }
                Op::Broadcast { a, axis } => {
                    let in_shape = self.shape(*a);
                    let (outer, inner) = outer_inner(in_shape, *axis);
                    let n = self.shape(Var(i))[*axis];
                    acc(&mut grads[a.0], outer * inner, |d| {
                        for o in 0..outer {
                            for r in 0..n {
                                let src = &g[(o * n + r) * inner..(o * n + r + 1) * inner];
                                d[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                            }
                        }
                    });
                }
                Op::Gather { table, ids } => {
                    let dim = self.shape(*table)[1];
                    acc(&mut grads[table.0], numel(*table), |d| {
                        for (r, &id) in ids.iter().enumerate() {
                            d[id * dim..(id + 1) * dim]
                                .iter_mut()
                                .zip(&g[r * dim..(r + 1) * dim])
                                .for_each(|(x, y)| *x += y);
                        }
                    });
                }
                Op::Sum(a) => {
                    let n = numel(*a);
                    acc(&mut grads[a.0], n, |d| d.iter_mut().for_each(|x| *x += g[0]));
                }
                Op::Mean(a) => {
                    let n = numel(*a);
                    let k = g[0] / n as f64;
                    acc(&mut grads[a.0], n, |d| d.iter_mut().for_each(|x| *x += k));
                }
                Op::SumSquares(a) => {
                    let av = self.value(*a).data();
                    acc(&mut grads[a.0], av.len(), |d| {
                        d.iter_mut().zip(av).for_each(|(x, y)| *x += 2.0 * g[0] * y);
                    });
                }
                Op::Mse(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let k = 2.0 * g[0] / av.len() as f64;
                    if ng(*a) {
                        acc(&mut grads[a.0], av.len(), |d| {
                            for j in 0..av.len() {
                                d[j] += k * (av[j] - bv[j]);
                            }
                        });
                    }
                    if ng(*b) {
                        acc(&mut grads[b.0], av.len(), |d| {
                            for j in 0..av.len() {
                                d[j] -= k * (av[j] - bv[j]);
                            }
                        });
                    }
                }
                Op::BceLogits { logits, targets } => {
                    let lv = self.value(*logits).data();
                    let k = g[0] / lv.len() as f64;
                    acc(&mut grads[logits.0], lv.len(), |d| {
                        for j in 0..lv.len() {
                            d[j] += k * (sigmoid(lv[j]) - targets[j]);
                        }
                    });
                }
            }
        }
        Ok(Grads::new(param_grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_roundtrip_and_layout() {
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let (p, s) = permute_data(&data, &[2, 3, 4], &[2, 0, 1]);
        assert_eq!(s, vec![4, 2, 3]);
        // out[k, i, j] = in[i, j, k]
        assert_eq!(p[(1 * 2 + 1) * 3 + 2], data[(1 * 3 + 2) * 4 + 1]);
        let (back, s2) = permute_data(&p, &s, &inverse_perm(&[2, 0, 1]));
        assert_eq!(s2, vec![2, 3, 4]);
        assert_eq!(back, data);
    }

    #[test]
    fn square_sum_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let mut g = Graph::new(&store);
        let wv = g.param(w);
        let sq = g.mul(wv, wv).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let mut g = Graph::new(&store);
        let wv = g.param(w);
        let zero = g.scale(wv, 0.0);
        let c = g.constant(Tensor::scalar(3.0));
        let s = g.sum(zero);
        let loss = g.add(s, c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(w).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros(&[2])).unwrap();
        let mut g = Graph::new(&store);
        let wv = g.param(w);
        assert!(matches!(g.backward(wv), Err(MindError::Contract(_))));
    }

    #[test]
    fn nan_reports_node() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(&[1], vec![f64::INFINITY]).unwrap()).unwrap();
        let mut g = Graph::new(&store);
        let wv = g.param(w);
        let z = g.scale(wv, 0.0); // inf * 0 = NaN
        let loss = g.sum(z);
        match g.backward(loss) {
            Err(MindError::Numeric { node, .. }) => assert_eq!(node, 0),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(&[2], vec![0.3, -0.7]).unwrap()).unwrap();
        let mut g = Graph::new(&store);
        let wv = g.param(w);
        let y = g.stop_grad(wv);
        let sq = g.sum_squares(y);
        let grads = g.backward(sq).unwrap();
        assert!(grads.get(w).is_none());
    }
}
