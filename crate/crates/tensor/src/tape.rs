//! Wengert-list reverse-mode differentiation.
//!
//! Every forward op appends a node holding its value and enough saved state to
//! apply its gradient rule. Nodes are appended in evaluation order, so inputs
//! always precede outputs and `backward` is a single reverse sweep.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{invalid, mismatch, Result, TensorError};
use crate::kernels::{self, gemm_nn_acc, gemm_nt_acc, gemm_tn_acc, sigmoid, softplus};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{s, Scalar};
use crate::scan::{self, ScanDims, ScanInputs};
use crate::tensor::{axis_split, numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Additive constant used to exclude masked attention keys before softmax.
pub const MASK_FILL: f64 = -1e9;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Sum { input: Var, axis: Option<usize> },
    Mean { input: Var, axis: Option<usize> },
    Max { input: Var, axis: usize, argmax: Vec<usize> },
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Silu(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax { input: Var, axis: usize },
    LogSoftmax { input: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gather { input: Var, indices: Vec<usize> },
    MaskFill { input: Var, mask: Vec<bool> },
    Scan { u: Var, delta: Var, a: Var, b: Var, c: Var, dims: ScanDims, trace: scan::ScanTrace<T> },
    CausalConv { x: Var, w: Var, bias: Var },
    SmoothL1 { input: Var, beta: T },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Max { .. } => "max",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softplus(..) => "softplus",
            Op::Silu(..) => "silu",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::MaskFill { .. } => "mask_fill",
            Op::Scan { .. } => "selective_scan",
            Op::CausalConv { .. } => "causal_conv",
            Op::SmoothL1 { .. } => "smooth_l1",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-writer record of forward computation.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    backward_done: bool,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`Tape::backward`]: one gradient per recorded node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(self.shapes[v.0].clone(), g.clone()),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn has(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }

    /// Gradients of every parameter registered on the tape, ordered by id.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<_> = self.params.iter().map(|&(id, v)| (id, self.get(v))).collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), backward_done: false, check_finite: cfg!(debug_assertions) }
    }

    /// Enables or disables the per-op non-finite check (on by default in debug builds).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears all recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.backward_done = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ── leaves ──────────────────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Arc::new(value), op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Registers a parameter (once per tape) and returns its handle.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: store.shared(id), op: Op::Leaf, requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// `a · b` where `a: [.., k]` is treated as a stack of rows and `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = numel(&sa) / k.max(1);
        let mut out = vec![T::zero(); m * n];
        gemm_nn_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ` with `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(mismatch("matmul_nt", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let ar = &self.data(a)[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = kernels::dot(ar, &self.data(b)[j * k..(j + 1) * k]);
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(invalid("transpose", format!("expected a matrix, got {sa:?}")));
        }
        let out = kernels::transpose(self.data(a), sa[0], sa[1]);
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(vec![sa[1], sa[0]], out), Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::Reshape(a), rg)
    }

    // ── elementwise binary (b may repeat over a's leading dims) ─────

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcast_ok(sa, sb) {
            return Err(mismatch(name, sa, sb));
        }
        let (da, db) = (self.data(a), self.data(b));
        let nb = db.len();
        Ok(da.iter().enumerate().map(|(i, &x)| f(x, db[i % nb])).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(shape, out), Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(shape, out), Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    // ── structural ─────────────────────────────────────────────────

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let sv = self.shape(v);
            let compatible =
                sv.len() == base.len() && sv.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(mismatch("concat", &base, sv));
            }
            total += sv[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let d = self.data(v);
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(inputs);
        self.push(Tensor::from_parts(shape, out), Op::Concat { inputs: inputs.to_vec(), axis }, rg)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start + len > sa[axis] {
            return Err(invalid("slice", format!("range {start}..{} on axis {axis} of {sa:?}", start + len)));
        }
        let (outer, alen, inner) = axis_split(&sa, axis);
        let d = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::Slice { input: a, axis, start }, rg)
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let total: usize = sizes.iter().sum();
        let sa = self.shape(a);
        if axis >= sa.len() || total != sa[axis] {
            return Err(invalid("split", format!("sizes {sizes:?} do not cover axis {axis} of {sa:?}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(a, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// Selects rows along axis 0.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.is_empty() {
            return Err(invalid("gather", "cannot gather from a scalar"));
        }
        let rows = sa[0];
        let width = numel(&sa[1..]);
        let d = self.data(a);
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(invalid("gather", format!("index {i} out of range for {rows} rows")));
            }
            out.extend_from_slice(&d[i * width..(i + 1) * width]);
        }
        let mut shape = sa;
        shape[0] = indices.len();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::Gather { input: a, indices: indices.to_vec() }, rg)
    }

    /// Replaces entries where `mask` is true with `value`. The mask tiles over
    /// leading dimensions like the right operand of [`Tape::add`].
    pub fn mask_fill(&mut self, a: Var, mask: &[bool], value: T) -> Result<Var> {
        let n = self.value(a).len();
        if mask.is_empty() || !n.is_multiple_of(mask.len()) {
            return Err(invalid("mask_fill", format!("mask of {} does not tile {n}", mask.len())));
        }
        let m = mask.len();
        let out: Vec<T> = self.data(a).iter().enumerate().map(|(i, &x)| if mask[i % m] { value } else { x }).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::MaskFill { input: a, mask: mask.to_vec() }, rg)
    }

    // ── reductions ─────────────────────────────────────────────────

    fn reduce_shape(shape: &[usize], axis: Option<usize>) -> Vec<usize> {
        match axis {
            None => Vec::new(),
            Some(ax) => {
                let mut s = shape.to_vec();
                s.remove(ax);
                s
            }
        }
    }

    fn check_axis(&self, a: Var, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(invalid(op, format!("axis {axis} out of range for {:?}", self.shape(a))));
        }
        Ok(())
    }

    fn sum_values(&self, a: Var, axis: Option<usize>) -> Vec<T> {
        let d = self.data(a);
        match axis {
            None => vec![d.iter().copied().sum()],
            Some(ax) => {
                let (outer, len, inner) = axis_split(self.shape(a), ax);
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (dst, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *dst += x;
                        }
                    }
                }
                out
            }
        }
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        if let Some(ax) = axis {
            self.check_axis(a, ax, "sum")?;
        }
        let out = self.sum_values(a, axis);
        let shape = Self::reduce_shape(self.shape(a), axis);
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::Sum { input: a, axis }, rg)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        if let Some(ax) = axis {
            self.check_axis(a, ax, "mean")?;
        }
        let count = match axis {
            None => self.value(a).len(),
            Some(ax) => self.shape(a)[ax],
        };
        if count == 0 {
            return Err(invalid("mean", "empty reduction"));
        }
        let inv = T::one() / s::<T>(count as f64);
        let out: Vec<T> = self.sum_values(a, axis).into_iter().map(|x| x * inv).collect();
        let shape = Self::reduce_shape(self.shape(a), axis);
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::Mean { input: a, axis }, rg)
    }

    /// Maximum along `axis`; the gradient goes to the first maximal entry.
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "max")?;
        let (outer, len, inner) = axis_split(self.shape(a), axis);
        if len == 0 {
            return Err(invalid("max", "empty reduction"));
        }
        let d = self.data(a);
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = d[o * len * inner + i];
                let mut best_l = 0;
                for l in 1..len {
                    let x = d[(o * len + l) * inner + i];
                    if x > best {
                        best = x;
                        best_l = l;
                    }
                }
                out[o * inner + i] = best;
                argmax[o * inner + i] = best_l;
            }
        }
        let shape = Self::reduce_shape(self.shape(a), Some(axis));
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::Max { input: a, axis, argmax }, rg)
    }

    // ── elementwise unary ──────────────────────────────────────────

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log(a), |x| x.ln())
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// Elementwise Huber / smooth-L1 with transition point `beta`.
    pub fn smooth_l1(&mut self, a: Var, beta: T) -> Result<Var> {
        if beta <= T::zero() {
            return Err(invalid("smooth_l1", "beta must be positive"));
        }
        let half = s::<T>(0.5);
        self.unary(a, Op::SmoothL1 { input: a, beta }, |x| {
            let ax = x.abs();
            if ax < beta {
                half * x * x / beta
            } else {
                ax - half * beta
            }
        })
    }

    // ── normalization ──────────────────────────────────────────────

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "softmax")?;
        let (outer, len, inner) = axis_split(self.shape(a), axis);
        let d = self.data(a);
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut mx = T::neg_infinity();
                for l in 0..len {
                    mx = mx.max(d[at(l)]);
                }
                let mut total = T::zero();
                for l in 0..len {
                    let e = (d[at(l)] - mx).exp();
                    out[at(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    out[at(l)] /= total;
                }
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::Softmax { input: a, axis }, rg)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "log_softmax")?;
        let (outer, len, inner) = axis_split(self.shape(a), axis);
        let d = self.data(a);
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut mx = T::neg_infinity();
                for l in 0..len {
                    mx = mx.max(d[at(l)]);
                }
                let mut total = T::zero();
                for l in 0..len {
                    total += (d[at(l)] - mx).exp();
                }
                let lse = mx + total.ln();
                for l in 0..len {
                    out[at(l)] = d[at(l)] - lse;
                }
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::LogSoftmax { input: a, axis }, rg)
    }

    /// Layer normalization over the last axis. A constant row maps to `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().ok_or_else(|| invalid("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("layer_norm", &sx, self.shape(gamma)));
        }
        let rows = numel(&sx) / c.max(1);
        let (d, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let eps = s::<T>(eps);
        let inv_c = T::one() / s::<T>(c as f64);
        let mut out = vec![T::zero(); d.len()];
        let mut xhat = vec![T::zero(); d.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &d[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(Tensor::from_parts(sx, out), Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    // ── sequence ops ───────────────────────────────────────────────

    /// Selective scan over `u, delta: [B?, T, D]`, `a: [D, N]`, `b, c: [B?, T, N]`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var) -> Result<Var> {
        let su = self.shape(u).to_vec();
        let (batch, len, channels) = match su.as_slice() {
            [t, d] => (1, *t, *d),
            [bt, t, d] => (*bt, *t, *d),
            _ => return Err(invalid("selective_scan", format!("u must be rank 2 or 3, got {su:?}"))),
        };
        if len == 0 {
            return Err(invalid("selective_scan", "empty sequence"));
        }
        if self.shape(delta) != su.as_slice() {
            return Err(mismatch("selective_scan", &su, self.shape(delta)));
        }
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || sa[0] != channels {
            return Err(mismatch("selective_scan", &su, &sa));
        }
        let state = sa[1];
        let mut sbc = su.clone();
        *sbc.last_mut().unwrap() = state;
        for v in [b, c] {
            if self.shape(v) != sbc.as_slice() {
                return Err(mismatch("selective_scan", &sbc, self.shape(v)));
            }
        }
        let dims = ScanDims { batch, len, channels, state };
        let inputs =
            ScanInputs { u: self.data(u), delta: self.data(delta), a: self.data(a), b: self.data(b), c: self.data(c) };
        let (y, trace) = scan::scan_traced(&inputs, dims);
        if !trace.states.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "selective_scan" });
        }
        let rg = self.rg(&[u, delta, a, b, c]);
        self.push(Tensor::from_parts(su, y), Op::Scan { u, delta, a, b, c, dims, trace }, rg)
    }

    /// Depthwise causal convolution: `y[t,d] = bias[d] + Σₖ w[d,k]·x[t-K+1+k, d]`
    /// with zeros before the sequence start. `x: [B?, T, D]`, `w: [D, K]`.
    pub fn causal_conv(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (batch, len, ch) = match sx.as_slice() {
            [t, d] => (1, *t, *d),
            [bt, t, d] => (*bt, *t, *d),
            _ => return Err(invalid("causal_conv", format!("x must be rank 2 or 3, got {sx:?}"))),
        };
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sw[0] != ch || self.shape(bias) != [ch] {
            return Err(mismatch("causal_conv", &sx, &sw));
        }
        let k = sw[1];
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(bias));
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..batch {
            for t in 0..len {
                let o = &mut out[(b * len + t) * ch..(b * len + t + 1) * ch];
                o.copy_from_slice(bd);
                for j in 0..k {
                    let shift = k - 1 - j;
                    if shift > t {
                        continue;
                    }
                    let src = &xd[(b * len + t - shift) * ch..(b * len + t - shift + 1) * ch];
                    for d in 0..ch {
                        o[d] += wd[d * k + j] * src[d];
                    }
                }
            }
        }
        let rg = self.rg(&[x, w, bias]);
        self.push(Tensor::from_parts(sx, out), Op::CausalConv { x, w, bias }, rg)
    }

    // ── backward ───────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.apply_rule(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&k, &v)| (k, v)).collect();
        params.sort();
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(), params })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(g) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Sums a gradient of `a`'s shape down to a suffix-broadcast operand of length `nb`.
    fn reduce_broadcast(g: &[T], nb: usize) -> Vec<T> {
        if g.len() == nb {
            return g.to_vec();
        }
        let mut out = vec![T::zero(); nb];
        for (i, &x) in g.iter().enumerate() {
            out[i % nb] += x;
        }
        out
    }

    fn apply_rule(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (k, n) = (sb[0], sb[1]);
                let m = numel(sa) / k.max(1);
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt_acc(g, self.data(*b), &mut da, m, n, k);
                    self.acc(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn_acc(self.data(*a), g, &mut db, m, k, n);
                    self.acc(grads, *b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nn_acc(g, self.data(*b), &mut da, m, n, k);
                    self.acc(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); n * k];
                    gemm_tn_acc(g, self.data(*a), &mut db, m, n, k);
                    self.acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.to_vec());
                if self.requires_grad(*b) {
                    let nb = self.value(*b).len();
                    self.acc(grads, *b, Self::reduce_broadcast(g, nb));
                }
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.to_vec());
                if self.requires_grad(*b) {
                    let nb = self.value(*b).len();
                    let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                    self.acc(grads, *b, Self::reduce_broadcast(&neg, nb));
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let nb = db.len();
                if self.requires_grad(*a) {
                    let ga = g.iter().enumerate().map(|(j, &x)| x * db[j % nb]).collect();
                    self.acc(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb: Vec<T> = g.iter().zip(da).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *b, Self::reduce_broadcast(&gb, nb));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(grads, *a, g.iter().map(|&x| x * c).collect());
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.acc(grads, *a, g.to_vec()),
            Op::Transpose(a) => {
                let sa = self.shape(*a);
                self.acc(grads, *a, kernels::transpose(g, sa[1], sa[0]));
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.requires_grad(v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[base..base + len * inner]);
                        }
                        self.acc(grads, v, gv);
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let sa = self.shape(*input);
                let (outer, alen, inner) = axis_split(sa, *axis);
                let len = node.value.shape()[*axis];
                let mut gi = vec![T::zero(); numel(sa)];
                for o in 0..outer {
                    let base = o * alen * inner + start * inner;
                    gi[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(grads, *input, gi);
            }
            Op::Sum { input, axis } | Op::Mean { input, axis } => {
                let sa = self.shape(*input);
                let scale = match (&node.op, axis) {
                    (Op::Mean { .. }, None) => T::one() / s::<T>(numel(sa) as f64),
                    (Op::Mean { .. }, Some(ax)) => T::one() / s::<T>(sa[*ax] as f64),
                    _ => T::one(),
                };
                let gi = match axis {
                    None => vec![g[0] * scale; numel(sa)],
                    Some(ax) => {
                        let (outer, len, inner) = axis_split(sa, *ax);
                        let mut gi = vec![T::zero(); numel(sa)];
                        for o in 0..outer {
                            for l in 0..len {
                                for j in 0..inner {
                                    gi[(o * len + l) * inner + j] = g[o * inner + j] * scale;
                                }
                            }
                        }
                        gi
                    }
                };
                self.acc(grads, *input, gi);
            }
            Op::Max { input, axis, argmax } => {
                let sa = self.shape(*input);
                let (outer, len, inner) = axis_split(sa, *axis);
                let mut gi = vec![T::zero(); numel(sa)];
                for o in 0..outer {
                    for j in 0..inner {
                        let l = argmax[o * inner + j];
                        gi[(o * len + l) * inner + j] = g[o * inner + j];
                    }
                }
                self.acc(grads, *input, gi);
            }
            Op::Exp(a) => {
                self.acc(grads, *a, g.iter().zip(out).map(|(&x, &y)| x * y).collect());
            }
            Op::Log(a) => {
                let d = self.data(*a);
                self.acc(grads, *a, g.iter().zip(d).map(|(&x, &y)| x / y).collect());
            }
            Op::Softplus(a) => {
                let d = self.data(*a);
                self.acc(grads, *a, g.iter().zip(d).map(|(&x, &y)| x * sigmoid(y)).collect());
            }
            Op::Silu(a) => {
                let d = self.data(*a);
                let gi = g
                    .iter()
                    .zip(d)
                    .map(|(&x, &y)| {
                        let sg = sigmoid(y);
                        x * (sg + y * sg * (T::one() - sg))
                    })
                    .collect();
                self.acc(grads, *a, gi);
            }
            Op::Relu(a) => {
                let d = self.data(*a);
                let gi = g.iter().zip(d).map(|(&x, &y)| if y > T::zero() { x } else { T::zero() }).collect();
                self.acc(grads, *a, gi);
            }
            Op::Sigmoid(a) => {
                let gi = g.iter().zip(out).map(|(&x, &y)| x * y * (T::one() - y)).collect();
                self.acc(grads, *a, gi);
            }
            Op::SmoothL1 { input, beta } => {
                let d = self.data(*input);
                let beta = *beta;
                let gi = g
                    .iter()
                    .zip(d)
                    .map(|(&x, &y)| if y.abs() < beta { x * y / beta } else { x * y.signum() })
                    .collect();
                self.acc(grads, *input, gi);
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut gi = vec![T::zero(); out.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + j;
                        let mut dot = T::zero();
                        for l in 0..len {
                            dot += g[at(l)] * out[at(l)];
                        }
                        for l in 0..len {
                            gi[at(l)] = out[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                self.acc(grads, *input, gi);
            }
            Op::LogSoftmax { input, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut gi = vec![T::zero(); out.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + j;
                        let mut total = T::zero();
                        for l in 0..len {
                            total += g[at(l)];
                        }
                        for l in 0..len {
                            gi[at(l)] = g[at(l)] - out[at(l)].exp() * total;
                        }
                    }
                }
                self.acc(grads, *input, gi);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = self.shape(*gamma)[0];
                let rows = rstd.len();
                let gm = self.data(*gamma);
                if self.requires_grad(*x) {
                    let inv_c = T::one() / s::<T>(c as f64);
                    let mut gx = vec![T::zero(); rows * c];
                    for r in 0..rows {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let dxh = g[r * c + j] * gm[j];
                            m1 += dxh;
                            m2 += dxh * xhat[r * c + j];
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        for j in 0..c {
                            let dxh = g[r * c + j] * gm[j];
                            gx[r * c + j] = rstd[r] * (dxh - m1 - xhat[r * c + j] * m2);
                        }
                    }
                    self.acc(grads, *x, gx);
                }
                if self.requires_grad(*gamma) {
                    let mut gg = vec![T::zero(); c];
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                    self.acc(grads, *gamma, gg);
                }
                if self.requires_grad(*beta) {
                    self.acc(grads, *beta, Self::reduce_broadcast(g, c));
                }
            }
            Op::Gather { input, indices } => {
                let sa = self.shape(*input);
                let width = numel(&sa[1..]);
                let mut gi = vec![T::zero(); numel(sa)];
                for (r, &ix) in indices.iter().enumerate() {
                    for j in 0..width {
                        gi[ix * width + j] += g[r * width + j];
                    }
                }
                self.acc(grads, *input, gi);
            }
            Op::MaskFill { input, mask } => {
                let m = mask.len();
                let gi = g.iter().enumerate().map(|(j, &x)| if mask[j % m] { T::zero() } else { x }).collect();
                self.acc(grads, *input, gi);
            }
            Op::Scan { u, delta, a, b, c, dims, trace } => {
                let inputs = ScanInputs {
                    u: self.data(*u),
                    delta: self.data(*delta),
                    a: self.data(*a),
                    b: self.data(*b),
                    c: self.data(*c),
                };
                let sg = scan::scan_backward(&inputs, trace, g, *dims);
                self.acc(grads, *u, sg.du);
                self.acc(grads, *delta, sg.ddelta);
                self.acc(grads, *a, sg.da);
                self.acc(grads, *b, sg.db);
                self.acc(grads, *c, sg.dc);
            }
            Op::CausalConv { x, w, bias } => {
                let sx = self.shape(*x);
                let (batch, len, ch) = match sx {
                    [t, d] => (1, *t, *d),
                    [bt, t, d] => (*bt, *t, *d),
                    _ => unreachable!(),
                };
                let k = self.shape(*w)[1];
                let (xd, wd) = (self.data(*x), self.data(*w));
                let mut gx = vec![T::zero(); xd.len()];
                let mut gw = vec![T::zero(); wd.len()];
                let mut gb = vec![T::zero(); ch];
                for bt in 0..batch {
                    for t in 0..len {
                        let go = &g[(bt * len + t) * ch..(bt * len + t + 1) * ch];
                        for d in 0..ch {
                            gb[d] += go[d];
                        }
                        for j in 0..k {
                            let shift = k - 1 - j;
                            if shift > t {
                                continue;
                            }
                            let src = (bt * len + t - shift) * ch;
                            for d in 0..ch {
                                gw[d * k + j] += go[d] * xd[src + d];
                                gx[src + d] += go[d] * wd[d * k + j];
                            }
                        }
                    }
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *w, gw);
                self.acc(grads, *bias, gb);
            }
        }
    }
}
