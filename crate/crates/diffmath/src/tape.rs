//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every op appends a node holding its forward value. [`Tape::backward`]
//! walks the nodes in reverse and accumulates vector-Jacobian products.
//! Nodes created with [`Tape::constant`] (and everything computed only
//! from constants) are skipped during the backward pass.

use std::collections::HashMap;

use crate::error::{DiffError, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const EMPTY: usize = usize::MAX;

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    SegmentMax(Var, Vec<usize>),
    Sum(Var),
    Reshape(Var),
    FocalLoss {
        logits: Var,
        target: usize,
        gamma: T,
        probs: Vec<T>,
    },
    Huber {
        pred: Var,
        diff: Vec<T>,
        delta: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Activation workspace for one forward/backward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, Var)>,
    param_lookup: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, expected: &[usize], got: &[usize]) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            param_lookup: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Differentiable leaf (gradients are reported for it).
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("input", t, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// Leaf bound to a stored parameter. Repeated calls reuse one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_lookup.get(&id) {
            return Ok(v);
        }
        let v = self.push("param", store.value(id).clone(), Op::Param, true)?;
        self.params.push((id, v));
        self.param_lookup.insert(id, v);
        Ok(v)
    }

    /// Copies a value into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(mismatch("matmul", &[k, n], self.value(b).shape()));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
            T::zero(),
        );
        let ng = self.ng(a) || self.ng(b);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b), ng)
    }

    /// Adds a bias row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if self.value(bias).len() != n {
            return Err(mismatch("add_row", &[n], self.value(bias).shape()));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, &bv) in out[r * n..(r + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let ng = self.ng(x) || self.ng(bias);
        self.push("add_row", Tensor::new(shape, out)?, Op::AddRow(x, bias), ng)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims2() != vb.dims2() {
            return Err(mismatch(name, va.shape(), vb.shape()));
        }
        let out: Vec<T> = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape().to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(name, Tensor::new(shape, out)?, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `alpha * x + beta`, elementwise.
    pub fn affine(&mut self, x: Var, alpha: T, beta: T) -> Result<Var> {
        let v = self.value(x);
        let out: Vec<T> = v.data().iter().map(|&e| alpha * e + beta).collect();
        let shape = v.shape().to_vec();
        let ng = self.ng(x);
        self.push("affine", Tensor::new(shape, out)?, Op::Affine(x, alpha), ng)
    }

    pub fn scale(&mut self, x: Var, alpha: T) -> Result<Var> {
        self.affine(x, alpha, T::zero())
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let v = self.value(x);
        let out: Vec<T> = v.data().iter().map(|&e| f(e)).collect();
        let shape = v.shape().to_vec();
        let ng = self.ng(x);
        self.push(name, Tensor::new(shape, out)?, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |e| if e > T::zero() { e } else { T::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(
            "sigmoid",
            x,
            |e| {
                if e >= T::zero() {
                    T::one() / (T::one() + (-e).exp())
                } else {
                    let z = e.exp();
                    z / (T::one() + z)
                }
            },
            Op::Sigmoid(x),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, |e| e.tanh(), Op::Tanh(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).rows(),
            None => return Err(DiffError::InvalidArgument("concat_cols of nothing".into())),
        };
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if r != rows {
                return Err(mismatch("concat_cols", &[rows, c], self.value(p).shape()));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push("concat_cols", Tensor::matrix(rows, total, out)?, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) => self.value(p).cols(),
            None => return Err(DiffError::InvalidArgument("concat_rows of nothing".into())),
        };
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if c != cols {
                return Err(mismatch("concat_rows", &[r, cols], self.value(p).shape()));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push("concat_rows", Tensor::matrix(rows, cols, out)?, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if start + len > n {
            return Err(DiffError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                len: n,
            });
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let ng = self.ng(x);
        self.push("slice_cols", Tensor::matrix(m, len, out)?, Op::SliceCols(x, start), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if start + len > m {
            return Err(DiffError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                len: m,
            });
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let ng = self.ng(x);
        self.push("slice_rows", Tensor::matrix(len, n, out)?, Op::SliceRows(x, start), ng)
    }

    /// `out[r] = x[index[r]]`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        let v = self.value(x);
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in index {
            if i >= m {
                return Err(DiffError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: m,
                });
            }
            out.extend_from_slice(v.row(i));
        }
        let ng = self.ng(x);
        self.push(
            "gather_rows",
            Tensor::matrix(index.len(), n, out)?,
            Op::GatherRows(x, index.to_vec()),
            ng,
        )
    }

    /// Per-segment elementwise maximum over the rows of `values`.
    ///
    /// Row `r` belongs to segment `segments[r]`. Segments without rows
    /// produce zeros and receive no gradient.
    pub fn segment_max(&mut self, values: Var, segments: &[usize], num_segments: usize) -> Result<Var> {
        let (e, d) = self.value(values).dims2();
        if segments.len() != e {
            return Err(mismatch("segment_max", &[e], &[segments.len()]));
        }
        let v = self.value(values);
        let mut out = vec![T::zero(); num_segments * d];
        let mut arg = vec![EMPTY; num_segments * d];
        for (r, &s) in segments.iter().enumerate() {
            if s >= num_segments {
                return Err(DiffError::IndexOutOfRange {
                    op: "segment_max",
                    index: s,
                    len: num_segments,
                });
            }
            let row = v.row(r);
            let base = s * d;
            for c in 0..d {
                let slot = base + c;
                if arg[slot] == EMPTY || row[c] > out[slot] {
                    out[slot] = row[c];
                    arg[slot] = r;
                }
            }
        }
        let ng = self.ng(values);
        self.push(
            "segment_max",
            Tensor::matrix(num_segments, d, out)?,
            Op::SegmentMax(values, arg),
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(DiffError::InvalidArgument("mean of empty tensor".into()));
        }
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(x);
        self.push("reshape", t, Op::Reshape(x), ng)
    }

    /// Softmax focal loss `-(1 - p_t)^gamma * log p_t` over all entries of `logits`.
    pub fn focal_loss(&mut self, logits: Var, target: usize, gamma: T) -> Result<Var> {
        let z = self.value(logits).data();
        if z.is_empty() || target >= z.len() {
            return Err(DiffError::IndexOutOfRange {
                op: "focal_loss",
                index: target,
                len: z.len(),
            });
        }
        if gamma < T::zero() {
            return Err(DiffError::InvalidArgument("focal gamma must be >= 0".into()));
        }
        let zmax = z.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = zmax + z.iter().map(|&v| (v - zmax).exp()).sum::<T>().ln();
        let probs: Vec<T> = z.iter().map(|&v| (v - lse).exp()).collect();
        let log_pt = z[target] - lse;
        let pt = probs[target];
        let loss = -(T::one() - pt).powf(gamma) * log_pt;
        let ng = self.ng(logits);
        self.push(
            "focal_loss",
            Tensor::scalar(loss),
            Op::FocalLoss {
                logits,
                target,
                gamma,
                probs,
            },
            ng,
        )
    }

    /// Mean elementwise Huber loss against a constant target.
    pub fn huber(&mut self, pred: Var, target: &Tensor<T>, delta: T) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(mismatch("huber", target.shape(), p.shape()));
        }
        if delta <= T::zero() {
            return Err(DiffError::InvalidArgument("huber delta must be > 0".into()));
        }
        if p.is_empty() {
            return Err(DiffError::InvalidArgument("huber of empty tensor".into()));
        }
        let half = T::of(0.5);
        let diff: Vec<T> = p.data().iter().zip(target.data()).map(|(&a, &b)| a - b).collect();
        let total: T = diff
            .iter()
            .map(|&e| {
                let a = e.abs();
                if a <= delta {
                    half * e * e
                } else {
                    delta * (a - half * delta)
                }
            })
            .sum();
        let loss = total / T::of(diff.len() as f64);
        let ng = self.ng(pred);
        self.push("huber", Tensor::scalar(loss), Op::Huber { pred, diff, delta }, ng)
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(mismatch("backward", &[1], self.value(root).shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let shape = self.value(root).shape().to_vec();
        grads[root.0] = Some(Tensor::new(shape, vec![T::one()])?);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if node.needs_grad {
                self.backprop_node(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                let shape = self.value(v).shape().to_vec();
                *slot = Some(g.reshaped(shape).expect("gradient element count matches node"));
            }
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).cols();
                if self.ng(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        gd,
                        (n as isize, 1),
                        self.value(*b).data(),
                        (1, n as isize),
                        &mut da,
                        T::zero(),
                    );
                    self.acc(grads, *a, Tensor::matrix(m, k, da)?);
                }
                if self.ng(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        self.value(*a).data(),
                        (1, k as isize),
                        gd,
                        (n as isize, 1),
                        &mut db,
                        T::zero(),
                    );
                    self.acc(grads, *b, Tensor::matrix(k, n, db)?);
                }
            }
            Op::AddRow(x, bias) => {
                self.acc(grads, *x, g.clone());
                if self.ng(*bias) {
                    let (m, n) = g.dims2();
                    let mut db = vec![T::zero(); n];
                    for r in 0..m {
                        for (d, &v) in db.iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                            *d += v;
                        }
                    }
                    self.acc(grads, *bias, Tensor::vector(db));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*b) {
                    let neg: Vec<T> = gd.iter().map(|&v| -v).collect();
                    self.acc(grads, *b, Tensor::vector(neg));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let d: Vec<T> = gd.iter().zip(self.value(*b).data()).map(|(&u, &w)| u * w).collect();
                    self.acc(grads, *a, Tensor::vector(d));
                }
                if self.ng(*b) {
                    let d: Vec<T> = gd.iter().zip(self.value(*a).data()).map(|(&u, &w)| u * w).collect();
                    self.acc(grads, *b, Tensor::vector(d));
                }
            }
            Op::Affine(x, alpha) => {
                let d: Vec<T> = gd.iter().map(|&u| u * *alpha).collect();
                self.acc(grads, *x, Tensor::vector(d));
            }
            Op::Relu(x) => {
                let d: Vec<T> = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&u, &y)| if y > T::zero() { u } else { T::zero() })
                    .collect();
                self.acc(grads, *x, Tensor::vector(d));
            }
            Op::Sigmoid(x) => {
                let d: Vec<T> = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&u, &y)| u * y * (T::one() - y))
                    .collect();
                self.acc(grads, *x, Tensor::vector(d));
            }
            Op::Tanh(x) => {
                let d: Vec<T> = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&u, &y)| u * (T::one() - y * y))
                    .collect();
                self.acc(grads, *x, Tensor::vector(d));
            }
            Op::ConcatCols(parts) => {
                let (m, total) = g.dims2();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(m * c);
                        for r in 0..m {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + c]);
                        }
                        self.acc(grads, p, Tensor::vector(d));
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.ng(p) {
                        self.acc(grads, p, Tensor::vector(gd[offset * n..(offset + r) * n].to_vec()));
                    }
                    offset += r;
                }
            }
            Op::SliceCols(x, start) => {
                let (m, n) = self.value(*x).dims2();
                let len = g.cols();
                let mut d = vec![T::zero(); m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                self.acc(grads, *x, Tensor::vector(d));
            }
            Op::SliceRows(x, start) => {
                let (m, n) = self.value(*x).dims2();
                let mut d = vec![T::zero(); m * n];
                d[start * n..start * n + gd.len()].copy_from_slice(gd);
                self.acc(grads, *x, Tensor::vector(d));
            }
            Op::GatherRows(x, index) => {
                let (m, n) = self.value(*x).dims2();
                let mut d = vec![T::zero(); m * n];
                for (r, &i) in index.iter().enumerate() {
                    for (dst, &src) in d[i * n..(i + 1) * n].iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                        *dst += src;
                    }
                }
                self.acc(grads, *x, Tensor::vector(d));
            }
            Op::SegmentMax(values, arg) => {
                let (e, n) = self.value(*values).dims2();
                let mut d = vec![T::zero(); e * n];
                for (slot, &r) in arg.iter().enumerate() {
                    if r != EMPTY {
                        d[r * n + slot % n] += gd[slot];
                    }
                }
                self.acc(grads, *values, Tensor::vector(d));
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, Tensor::vector(vec![gd[0]; n]));
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, Tensor::vector(gd.to_vec()));
            }
            Op::FocalLoss {
                logits,
                target,
                gamma,
                probs,
            } => {
                let pt = probs[*target];
                let one_m = T::one() - pt;
                let log_pt = pt.ln();
                // dL/dp_t for L = -(1 - p)^g log p
                let dl_dp = if *gamma == T::zero() {
                    -T::one() / pt
                } else {
                    *gamma * one_m.powf(*gamma - T::one()) * log_pt - one_m.powf(*gamma) / pt
                };
                let scale = gd[0] * dl_dp * pt;
                let d: Vec<T> = probs
                    .iter()
                    .enumerate()
                    .map(|(j, &pj)| {
                        let delta = if j == *target { T::one() } else { T::zero() };
                        scale * (delta - pj)
                    })
                    .collect();
                self.acc(grads, *logits, Tensor::vector(d));
            }
            Op::Huber { pred, diff, delta } => {
                let n = T::of(diff.len() as f64);
                let d: Vec<T> = diff
                    .iter()
                    .map(|&e| gd[0] * e.max(-*delta).min(*delta) / n)
                    .collect();
                self.acc(grads, *pred, Tensor::vector(d));
            }
        }
        Ok(())
    }
}

/// Result of a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a node; `None` when it does not influence the root.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(move |&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }

    /// Adds parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in self.param_grads() {
            store.grad_mut(id).add_assign(g);
        }
    }
}
