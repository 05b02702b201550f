// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode differentiation over a fixed set of matrix primitives.
//!
//! A [`Tape`] is an arena of nodes in evaluation order. Each node keeps its
//! forward value; when recording, it also keeps the op and its input handles
//! so [`Tape::backward`] can replay the graph in reverse. Leaves are either
//! trainable (receive gradients) or frozen (treated as constants).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{self, Matrix};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Node kinds and the inputs their backward rules need.
#[derive(Debug, Clone)]
enum Op {
    Leaf { trainable: bool },
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    /// `aᵀ · b`
    MatMulTN(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// Adds a 1×c row vector to every row.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Scales a matrix by a 1×1 node.
    ScaleBy(Var, Var),
    Silu(Var),
    Exp(Var),
    Log(Var),
    // Masked entries are exactly zero, so the backward rule needs no mask.
    Softmax { input: Var },
    LogSoftmax(Var),
    LayerNorm { input: Var, gain: Var, bias: Var },
    /// Mean token cross-entropy over rows carrying a target.
    CrossEntropy { logits: Var, targets: Vec<Option<usize>> },
    Slice { input: Var, r0: usize, c0: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows { table: Var, indices: Vec<usize> },
    GatherCols { input: Var, indices: Vec<usize> },
    MeanRows(Var),
    Sum(Var),
    SumSquares(Var),
    /// `Σ c_k · s_k` over 1×1 nodes.
    ScalarCombine(Vec<(Var, f64)>),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) | Op::MatMulNT(..) | Op::MatMulTN(..) => "matmul",
            Op::Add(..) | Op::Sub(..) | Op::AddRow(..) => "add",
            Op::Mul(..) | Op::Scale(..) | Op::ScaleBy(..) => "scale",
            Op::Silu(_) => "elementwise-silu",
            Op::Exp(_) | Op::Log(_) => "elementwise-exp/log",
            Op::Softmax { .. } | Op::LogSoftmax(_) => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::CrossEntropy { .. } => "cross-entropy",
            Op::Slice { .. }
            | Op::ConcatRows(_)
            | Op::ConcatCols(_)
            | Op::GatherRows { .. }
            | Op::GatherCols { .. } => "slice/concat",
            Op::MeanRows(_) | Op::Sum(_) | Op::SumSquares(_) | Op::ScalarCombine(_) => {
                "scalar-combine"
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Option<Op>,
    requires_grad: bool,
}

/// Gradients of a scalar loss for the trainable leaves of one tape.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, Matrix>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Matrix> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Matrix)> {
        self.grads.iter()
    }
}

/// Evaluation arena. See module docs.
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records ops for a later backward pass.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A tape that only evaluates; values are identical, nothing is recorded.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Op kinds in evaluation order (used to compare tapes structurally).
    pub fn op_kinds(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .map(|n| n.op.as_ref().map_or("untracked", Op::kind))
            .collect()
    }

    pub fn leaf(&mut self, value: Matrix, trainable: bool) -> Var {
        let requires_grad = trainable && self.record;
        self.push_raw(value, Some(Op::Leaf { trainable }), requires_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    fn push_raw(&mut self, value: Matrix, op: Option<Op>, requires_grad: bool) -> Var {
        let op = if self.record { op } else { None };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Nodes that cannot reach a trainable leaf never need their op.
        let op = requires_grad.then_some(op);
        self.push_raw(value, op, requires_grad)
    }

    // -----------------------------------------------------------------------
    // Primitives
    // -----------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = numerics::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = numerics::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMulNT(a, b), &[a, b]))
    }

    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = numerics::matmul_tn(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMulTN(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != m.cols() {
            return Err(Error::Shape(format!(
                "add_row {:?} + {:?}",
                m.shape(),
                r.shape()
            )));
        }
        let mut out = m.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).shape() != (1, 1) {
            return Err(Error::Shape("scale_by needs a 1x1 factor".into()));
        }
        let c = self.scalar(s);
        let v = self.value(a).scale(c);
        Ok(self.push(v, Op::ScaleBy(a, s), &[a, s]))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(silu);
        self.push(v, Op::Silu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a), &[a])
    }

    /// Row-wise softmax. With `causal`, row `i` only covers columns `0..=i`.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Var {
        let v = softmax_rows(self.value(a), causal);
        self.push(v, Op::Softmax { input: a }, &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = Matrix::zeros(m.rows(), m.cols());
        for i in 0..m.rows() {
            out.row_mut(i)
                .copy_from_slice(&numerics::log_softmax(m.row(i)));
        }
        self.push(out, Op::LogSoftmax(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xm = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        if g.shape() != (1, xm.cols()) || b.shape() != (1, xm.cols()) {
            return Err(Error::Shape("layer_norm gain/bias must be 1 x cols".into()));
        }
        let mut out = Matrix::zeros(xm.rows(), xm.cols());
        for i in 0..xm.rows() {
            let (xhat, _) = normalize_row(xm.row(i));
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = xhat[j] * g.data()[j] + b.data()[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                input: x,
                gain,
                bias,
            },
            &[x, gain, bias],
        ))
    }

    /// Mean cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Result<Var> {
        let m = self.value(logits);
        if targets.len() != m.rows() {
            return Err(Error::Shape(format!(
                "{} targets for {} logit rows",
                targets.len(),
                m.rows()
            )));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= m.cols() {
                    return Err(Error::Shape(format!("target {t} out of {} classes", m.cols())));
                }
                let row = m.row(i);
                total += numerics::log_sum_exp(row) - row[t];
                count += 1;
            }
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            Matrix::scalar(value),
            Op::CrossEntropy { logits, targets },
            &[logits],
        ))
    }

    pub fn slice(&mut self, a: Var, r0: usize, r1: usize, c0: usize, c1: usize) -> Result<Var> {
        let m = self.value(a);
        if r0 > r1 || c0 > c1 || r1 > m.rows() || c1 > m.cols() {
            return Err(Error::Shape(format!(
                "slice [{r0}..{r1}, {c0}..{c1}] of {:?}",
                m.shape()
            )));
        }
        let v = m.slice(r0, r1, c0, c1);
        Ok(self.push(v, Op::Slice { input: a, r0, c0 }, &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let mut out = self.value(*first).clone();
        for p in &parts[1..] {
            out = out.vstack(self.value(*p))?;
        }
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let mut out = self.value(*first).clone();
        for p in &parts[1..] {
            out = out.hstack(self.value(*p))?;
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::Shape(format!("row index {bad} of {} rows", t.rows())));
        }
        let mut out = Matrix::zeros(indices.len(), t.cols());
        for (k, &i) in indices.iter().enumerate() {
            out.row_mut(k).copy_from_slice(t.row(i));
        }
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        ))
    }

    pub fn gather_cols(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let m = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&j| j >= m.cols()) {
            return Err(Error::Shape(format!("col index {bad} of {} cols", m.cols())));
        }
        let out = Matrix::from_fn(m.rows(), indices.len(), |i, k| m.get(i, indices[k]));
        Ok(self.push(
            out,
            Op::GatherCols {
                input: a,
                indices: indices.to_vec(),
            },
            &[a],
        ))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = Matrix::row_vector(&self.value(a).mean_rows());
        self.push(v, Op::MeanRows(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).frobenius_sq());
        self.push(v, Op::SumSquares(a), &[a])
    }

    pub fn scalar_combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, c) in terms {
            if self.value(v).shape() != (1, 1) {
                return Err(Error::Shape("scalar_combine takes 1x1 nodes".into()));
            }
            total += c * self.scalar(v);
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(
            Matrix::scalar(total),
            Op::ScalarCombine(terms.to_vec()),
            &inputs,
        ))
    }

    // -----------------------------------------------------------------------
    // Backward
    // -----------------------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every trainable leaf
    /// that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            match op {
                Op::Leaf { trainable } => {
                    if *trainable {
                        out.grads.insert(Var(idx), upstream);
                    }
                }
                _ => self.propagate(op, &node.value, &upstream, &mut grads)?,
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.axpy(1.0, &g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Matrix,
        up: &Matrix,
        grads: &mut [Option<Matrix>],
    ) -> Result<()> {
        match op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let g = numerics::matmul_nt(up, self.value(*b))?;
                    self.accumulate(grads, *a, g);
                }
                if self.wants(*b) {
                    let g = numerics::matmul_tn(self.value(*a), up)?;
                    self.accumulate(grads, *b, g);
                }
            }
            Op::MatMulNT(a, b) => {
                if self.wants(*a) {
                    let g = numerics::matmul(up, self.value(*b))?;
                    self.accumulate(grads, *a, g);
                }
                if self.wants(*b) {
                    let g = numerics::matmul_tn(up, self.value(*a))?;
                    self.accumulate(grads, *b, g);
                }
            }
            Op::MatMulTN(a, b) => {
                if self.wants(*a) {
                    let g = numerics::matmul_nt(self.value(*b), up)?;
                    self.accumulate(grads, *a, g);
                }
                if self.wants(*b) {
                    let g = numerics::matmul(self.value(*a), up)?;
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, up.clone());
                self.accumulate(grads, *b, up.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, up.clone());
                self.accumulate(grads, *b, up.scale(-1.0));
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, up.clone());
                if self.wants(*row) {
                    self.accumulate(grads, *row, Matrix::row_vector(&column_sums(up)));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, up.hadamard(self.value(*b))?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, up.hadamard(self.value(*a))?);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, up.scale(*c)),
            Op::ScaleBy(a, s) => {
                let c = self.scalar(*s);
                if self.wants(*a) {
                    self.accumulate(grads, *a, up.scale(c));
                }
                if self.wants(*s) {
                    let g = numerics::dot(up.data(), self.value(*a).data());
                    self.accumulate(grads, *s, Matrix::scalar(g));
                }
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let mut g = up.clone();
                for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
                    let s = sigmoid(xv);
                    *gv *= s * (1.0 + xv * (1.0 - s));
                }
                self.accumulate(grads, *a, g);
            }
            Op::Exp(a) => self.accumulate(grads, *a, up.hadamard(out)?),
            Op::Log(a) => {
                let x = self.value(*a);
                let g = Matrix::from_fn(x.rows(), x.cols(), |i, j| up.get(i, j) / x.get(i, j));
                self.accumulate(grads, *a, g);
            }
            Op::Softmax { input, .. } => {
                let mut g = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let (p, u) = (out.row(i), up.row(i));
                    let inner = numerics::dot(p, u);
                    for (j, gv) in g.row_mut(i).iter_mut().enumerate() {
                        *gv = p[j] * (u[j] - inner);
                    }
                }
                self.accumulate(grads, *input, g);
            }
            Op::LogSoftmax(a) => {
                let mut g = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let u = up.row(i);
                    let total: f64 = u.iter().sum();
                    for (j, gv) in g.row_mut(i).iter_mut().enumerate() {
                        *gv = u[j] - out.get(i, j).exp() * total;
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::LayerNorm { input, gain, bias } => {
                let x = self.value(*input);
                let gvec = self.value(*gain).data();
                let cols = x.cols();
                let mut dx = Matrix::zeros(x.rows(), cols);
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                for i in 0..x.rows() {
                    let (xhat, inv_std) = normalize_row(x.row(i));
                    let u = up.row(i);
                    let dxhat: Vec<f64> = (0..cols).map(|j| u[j] * gvec[j]).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                    let mean_dx = numerics::dot(&dxhat, &xhat) / cols as f64;
                    for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                        *d = inv_std * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                    for j in 0..cols {
                        dgain[j] += u[j] * xhat[j];
                        dbias[j] += u[j];
                    }
                }
                if self.wants(*input) {
                    self.accumulate(grads, *input, dx);
                }
                if self.wants(*gain) {
                    self.accumulate(grads, *gain, Matrix::row_vector(&dgain));
                }
                if self.wants(*bias) {
                    self.accumulate(grads, *bias, Matrix::row_vector(&dbias));
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let m = self.value(*logits);
                let count = targets.iter().filter(|t| t.is_some()).count();
                let mut g = Matrix::zeros(m.rows(), m.cols());
                if count > 0 {
                    let scale = up.item() / count as f64;
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let p = numerics::softmax(m.row(i));
                            let row = g.row_mut(i);
                            for (j, pv) in p.iter().enumerate() {
                                row[j] = scale * (pv - if j == t { 1.0 } else { 0.0 });
                            }
                        }
                    }
                }
                self.accumulate(grads, *logits, g);
            }
            Op::Slice { input, r0, c0 } => {
                let src = self.value(*input);
                let mut g = Matrix::zeros(src.rows(), src.cols());
                for i in 0..up.rows() {
                    for j in 0..up.cols() {
                        g.set(r0 + i, c0 + j, up.get(i, j));
                    }
                }
                self.accumulate(grads, *input, g);
            }
            Op::ConcatRows(parts) => {
                let mut r = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if self.wants(*p) {
                        self.accumulate(grads, *p, up.slice(r, r + rows, 0, up.cols()));
                    }
                    r += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    if self.wants(*p) {
                        self.accumulate(grads, *p, up.slice(0, up.rows(), c, c + cols));
                    }
                    c += cols;
                }
            }
            Op::GatherRows { table, indices } => {
                let t = self.value(*table);
                let mut g = Matrix::zeros(t.rows(), t.cols());
                for (k, &i) in indices.iter().enumerate() {
                    for (gv, u) in g.row_mut(i).iter_mut().zip(up.row(k)) {
                        *gv += u;
                    }
                }
                self.accumulate(grads, *table, g);
            }
            Op::GatherCols { input, indices } => {
                let m = self.value(*input);
                let mut g = Matrix::zeros(m.rows(), m.cols());
                for i in 0..m.rows() {
                    for (k, &j) in indices.iter().enumerate() {
                        let cur = g.get(i, j);
                        g.set(i, j, cur + up.get(i, k));
                    }
                }
                self.accumulate(grads, *input, g);
            }
            Op::MeanRows(a) => {
                let m = self.value(*a);
                let n = m.rows().max(1) as f64;
                let g = Matrix::from_fn(m.rows(), m.cols(), |_, j| up.get(0, j) / n);
                self.accumulate(grads, *a, g);
            }
            Op::Sum(a) => {
                let m = self.value(*a);
                self.accumulate(grads, *a, Matrix::filled(m.rows(), m.cols(), up.item()));
            }
            Op::SumSquares(a) => {
                let g = self.value(*a).scale(2.0 * up.item());
                self.accumulate(grads, *a, g);
            }
            Op::ScalarCombine(terms) => {
                for &(v, c) in terms {
                    self.accumulate(grads, v, Matrix::scalar(c * up.item()));
                }
            }
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    out
}

fn normalize_row(row: &[f64]) -> (Vec<f64>, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    (row.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

fn softmax_rows(m: &Matrix, causal: bool) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let width = if causal { (i + 1).min(m.cols()) } else { m.cols() };
        let p = numerics::softmax(&m.row(i)[..width]);
        out.row_mut(i)[..width].copy_from_slice(&p);
    }
    out
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// A named leaf tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub trainable: bool,
}

/// Named leaves, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) {
        self.params.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Places every parameter on the tape as a leaf.
    pub fn register(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(p.value.clone(), p.trainable)))
            .collect()
    }
}

/// Outputs of a recorded forward pass.
pub struct Recorded {
    pub tape: Tape,
    pub vars: BTreeMap<String, Var>,
    pub output: Var,
}

/// Runs `program` on a fresh recording tape with `params` as leaves.
pub fn forward_record<F>(program: F, params: &ParamSet) -> Result<Recorded>
where
    F: FnOnce(&mut Tape, &BTreeMap<String, Var>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let output = program(&mut tape, &vars)?;
    Ok(Recorded { tape, vars, output })
}

/// Gradients of a scalar program keyed by parameter name.
pub fn gradients_by_name<F>(program: F, params: &ParamSet) -> Result<(f64, BTreeMap<String, Matrix>)>
where
    F: FnOnce(&mut Tape, &BTreeMap<String, Var>) -> Result<Var>,
{
    let rec = forward_record(program, params)?;
    let loss = rec.tape.scalar(rec.output);
    let mut grads = rec.tape.backward(rec.output)?;
    let mut named = BTreeMap::new();
    for (name, var) in &rec.vars {
        if params.get(name).is_some_and(|p| p.trainable) {
            let g = grads.take(*var).unwrap_or_else(|| {
                let v = rec.tape.value(*var);
                Matrix::zeros(v.rows(), v.cols())
            });
            named.insert(name.clone(), g);
        }
    }
    Ok((loss, named))
}

// ---------------------------------------------------------------------------
// Finite-difference verification
// ---------------------------------------------------------------------------

/// Gradient-check outcome for one leaf.
#[derive(Debug, Clone, PartialEq)]
pub enum LeafCheck {
    /// Frozen leaf: no gradient was produced, as required.
    Frozen,
    Checked { max_rel_error: f64, passed: bool },
}

#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub leaves: BTreeMap<String, LeafCheck>,
    pub rtol: f64,
}

impl FiniteDiffReport {
    pub fn all_passed(&self) -> bool {
        self.leaves
            .values()
            .all(|c| !matches!(c, LeafCheck::Checked { passed: false, .. }))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.leaves
            .values()
            .filter_map(|c| match c {
                LeafCheck::Checked { max_rel_error, .. } => Some(*max_rel_error),
                LeafCheck::Frozen => None,
            })
            .fold(0.0, f64::max)
    }
}

/// Magnitude floor in the relative-error denominator; entries whose true
/// gradient is below it are compared on an absolute scale.
pub const FD_ABS_FLOOR: f64 = 1e-6;

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_ABS_FLOOR)
}

/// Compares analytic gradients against central differences for every leaf.
///
/// Frozen leaves are reported as such after confirming the backward pass
/// produced nothing for them.
pub fn finite_diff_check<F>(
    program: F,
    params: &ParamSet,
    step: f64,
    rtol: f64,
) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var>,
{
    let rec = forward_record(&program, params)?;
    let grads = rec.tape.backward(rec.output)?;

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars = p.register(&mut tape);
        let out = program(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut leaves = BTreeMap::new();
    let mut probe = params.clone();
    for (name, param) in params.iter() {
        let var = rec.vars[name];
        if !param.trainable {
            if grads.get(var).is_some() {
                return Err(Error::Construction(format!(
                    "frozen leaf `{name}` received a gradient"
                )));
            }
            leaves.insert(name.clone(), LeafCheck::Frozen);
            continue;
        }
        let zeros = Matrix::zeros(param.value.rows(), param.value.cols());
        let analytic = grads.get(var).unwrap_or(&zeros).clone();
        let mut worst = 0.0f64;
        for k in 0..param.value.len() {
            let orig = param.value.data()[k];
            probe.get_mut(name).expect("same keys").value.data_mut()[k] = orig + step;
            let plus = eval(&probe)?;
            probe.get_mut(name).expect("same keys").value.data_mut()[k] = orig - step;
            let minus = eval(&probe)?;
            probe.get_mut(name).expect("same keys").value.data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic.data()[k], numeric));
        }
        leaves.insert(
            name.clone(),
            LeafCheck::Checked {
                max_rel_error: worst,
                passed: worst <= rtol,
            },
        );
    }
    Ok(FiniteDiffReport { leaves, rtol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn linear_layer_matches_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(3, 4, &mut rng);
        let x = random(4, 2, &mut rng);
        let mut tape = Tape::new();
        let (wv, xv) = (tape.leaf(w.clone(), true), tape.constant(x.clone()));
        let y = tape.matmul(wv, xv).unwrap();
        assert_eq!(tape.value(y), &numerics::matmul(&w, &x).unwrap());
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu(0.0), 0.0);
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((silu(1.0) - expected).abs() < 1e-15);
        assert!((silu(1.0) - 0.731059).abs() < 1e-6);
    }

    #[test]
    fn recording_and_plain_tapes_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(5, 6, &mut rng);
        let run = |mut tape: Tape| {
            let v = tape.leaf(x.clone(), true);
            let g = tape.constant(Matrix::filled(1, 6, 1.5));
            let b = tape.constant(Matrix::filled(1, 6, -0.2));
            let n = tape.layer_norm(v, g, b).unwrap();
            let s = tape.silu(n);
            let p = tape.softmax_rows(s, true);
            let out = tape.value(p).clone();
            (out, tape.op_kinds())
        };
        let (a, kinds_a) = run(Tape::new());
        let (b, _) = run(Tape::no_grad());
        let (c, kinds_c) = run(Tape::new());
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(kinds_a, kinds_c);
    }

    #[test]
    fn quadratic_form_gradient_closed_form() {
        // f(W) = ‖Wx‖², ∇ = 2 W x xᵀ
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(3, 4, &mut rng);
        let x = random(4, 1, &mut rng);
        let mut tape = Tape::new();
        let (wv, xv) = (tape.leaf(w.clone(), true), tape.constant(x.clone()));
        let y = tape.matmul(wv, xv).unwrap();
        let f = tape.sum_squares(y);
        let grads = tape.backward(f).unwrap();
        let wx = numerics::matmul(&w, &x).unwrap();
        let expected = numerics::matmul_nt(&wx, &x).unwrap().scale(2.0);
        assert!(grads.get(wv).unwrap().max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn softmax_cross_entropy_gradient_identity() {
        let logits = Matrix::row_vector(&[0.3, -1.2, 2.0, 0.5]);
        let mut tape = Tape::new();
        let l = tape.leaf(logits.clone(), true);
        let ce = tape.cross_entropy(l, vec![Some(2)]).unwrap();
        let g = tape.backward(ce).unwrap();
        let mut expected = numerics::softmax(logits.data());
        expected[2] -= 1.0;
        assert!(g.get(l).unwrap().max_abs_diff(&Matrix::row_vector(&expected)) < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let v = tape.leaf(Matrix::zeros(2, 2), true);
        assert!(matches!(tape.backward(v), Err(Error::Shape(_))));
    }

    fn mlp_params(seed: u64, d: usize) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        p.insert("w1", random(d, d, &mut rng), true);
        p.insert("b1", random(1, d, &mut rng), true);
        p.insert("w2", random(d, 3, &mut rng), true);
        p.insert("x", random(4, d, &mut rng), false);
        p
    }

    fn mlp_program(tape: &mut Tape, v: &BTreeMap<String, Var>) -> Result<Var> {
        let h = tape.matmul(v["x"], v["w1"])?;
        let h = tape.add_row(h, v["b1"])?;
        let h = tape.silu(h);
        let logits = tape.matmul(h, v["w2"])?;
        tape.cross_entropy(logits, vec![Some(0), Some(2), None, Some(1)])
    }

    #[test]
    fn two_layer_mlp_matches_central_differences() {
        let params = mlp_params(0, 8);
        let report = finite_diff_check(mlp_program, &params, 1e-5, 1e-5).unwrap();
        assert!(report.all_passed(), "{report:?}");
        assert_eq!(report.leaves["x"], LeafCheck::Frozen);
    }

    #[test]
    fn scalar_quadratic_check_is_tight() {
        let mut p = ParamSet::new();
        p.insert("a", Matrix::scalar(0.7), true);
        let report = finite_diff_check(
            |t, v| {
                let sq = t.sum_squares(v["a"]);
                t.scalar_combine(&[(sq, 3.0), (v["a"], -1.0)])
            },
            &p,
            1e-6,
            1e-8,
        )
        .unwrap();
        assert!(report.all_passed(), "{report:?}");
    }

    #[test]
    fn every_primitive_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = ParamSet::new();
        p.insert("a", random(4, 5, &mut rng), true);
        p.insert("b", random(5, 4, &mut rng), true);
        p.insert("g", random(1, 5, &mut rng), true);
        p.insert("bias", random(1, 5, &mut rng), true);
        p.insert("s", Matrix::scalar(0.4), true);
        p.insert("pos", random(4, 5, &mut rng).map(|v| v.abs() + 0.5), true);
        let program = |t: &mut Tape, v: &BTreeMap<String, Var>| -> Result<Var> {
            let ln = t.layer_norm(v["a"], v["g"], v["bias"])?;
            let ab = t.matmul(ln, v["b"])?;
            let sm = t.softmax_rows(ab, true);
            let nt = t.matmul_nt(sm, v["b"])?; // 4x5
            let tn = t.matmul_tn(v["a"], nt)?; // 5x5
            let lsm = t.log_softmax_rows(tn);
            let ex = t.exp(v["a"]);
            let lg = t.log(v["pos"]);
            let prod = t.mul(ex, lg)?;
            let scaled = t.scale_by(prod, v["s"])?;
            let diff = t.sub(scaled, v["a"])?;
            let sl = t.slice(diff, 1, 3, 0, 5)?;
            let cat = t.concat_rows(&[sl, v["g"]])?;
            let cc = t.concat_cols(&[cat, cat])?;
            let gathered = t.gather_rows(cc, &[2, 0, 0])?;
            let picked = t.gather_cols(gathered, &[1, 7, 7])?;
            let pooled = t.mean_rows(picked);
            let ce = t.cross_entropy(ab, vec![Some(1), None, Some(3), Some(0)])?;
            let s1 = t.sum(lsm);
            let s2 = t.sum_squares(pooled);
            let s3 = t.sum(diff);
            t.scalar_combine(&[(ce, 1.0), (s1, 0.1), (s2, 0.7), (s3, -0.05)])
        };
        let report = finite_diff_check(program, &p, 1e-5, 1e-6).unwrap();
        assert!(report.all_passed(), "{report:?}");
    }

    #[test]
    fn gradients_are_linear_in_the_loss() {
        let params = mlp_params(5, 6);
        let l1 = |t: &mut Tape, v: &BTreeMap<String, Var>| mlp_program(t, v);
        let l2 = |t: &mut Tape, v: &BTreeMap<String, Var>| -> Result<Var> {
            let h = t.matmul(v["x"], v["w1"])?;
            Ok(t.sum_squares(h))
        };
        let (a, b) = (0.3, -1.7);
        let (_, g1) = gradients_by_name(l1, &params).unwrap();
        let (_, g2) = gradients_by_name(l2, &params).unwrap();
        let (_, g12) = gradients_by_name(
            |t, v| {
                let x = l1(t, v)?;
                let y = l2(t, v)?;
                t.scalar_combine(&[(x, a), (y, b)])
            },
            &params,
        )
        .unwrap();
        for (name, g) in &g12 {
            let mut expected = g1[name].scale(a);
            expected.axpy(b, &g2[name]);
            assert!(g.max_abs_diff(&expected) <= 1e-10, "{name}");
        }
    }

    #[test]
    fn frozen_leaves_receive_nothing() {
        let params = mlp_params(6, 4);
        let rec = forward_record(mlp_program, &params).unwrap();
        let grads = rec.tape.backward(rec.output).unwrap();
        assert!(grads.get(rec.vars["x"]).is_none());
        assert_eq!(grads.len(), 3);
    }
}
