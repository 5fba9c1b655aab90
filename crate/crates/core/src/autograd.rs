//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! already a topological order. [`Graph::backward`] walks the nodes in reverse
//! and visits each one exactly once. Every operation checks its output for
//! non-finite values and fails with [`AutogradError::NonFinite`] instead of
//! letting NaN or Inf propagate.
//!
//! Scalars have shape `[]`, vectors `[n]` and matrices `[rows, cols]`, all
//! stored row-major.

use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

/// Probability floor used by [`Graph::cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutogradError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op} expects a rank-{expected} tensor, got shape {shape:?}")]
    RankError {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("index {index} out of range (size {size}) in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this graph; call reset_grads first")]
    BackwardAlreadyRun,
    #[error("dropout rate must lie in [0, 1), got {0}")]
    InvalidRate(f64),
    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadData { shape: Vec<usize>, len: usize },
}

pub type Result<T> = std::result::Result<T, AutogradError>;

/// A shape-tagged row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(AutogradError::BadData {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row `r` of a matrix.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatVec(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Concat(Var, Var),
    ConcatCols(Var, Var),
    Slice(Var, usize),
    Row(Var, usize),
    StackRows(Vec<Option<Var>>),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    CrossEntropy(Var, usize),
    Dropout(Var, Vec<f64>),
    MaxPool(Var, Vec<Option<usize>>),
    Sum(Var),
    Gather(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Operation recorder and gradient engine. A graph is confined to one thread.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn check_rank(op: &'static str, t: &Tensor, expected: usize) -> Result<()> {
    if t.rank() != expected {
        return Err(AutogradError::RankError {
            op,
            expected,
            shape: t.shape.clone(),
        });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutogradError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input tensor. Parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    /// Records an input without copying its buffer.
    pub fn shared_leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutogradError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Clears gradients so that [`Graph::backward`] may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_rank("matmul", ta, 2)?;
        check_rank("matmul", tb, 2)?;
        let (p, q, r) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        if tb.shape[0] != q {
            return Err(AutogradError::ShapeMismatch {
                op: "matmul",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let mut out = vec![0.0; p * r];
        for i in 0..p {
            let arow = &ta.data[i * q..(i + 1) * q];
            let orow = &mut out[i * r..(i + 1) * r];
            for (k, &aik) in arow.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = &tb.data[k * r..(k + 1) * r];
                for (o, &bkj) in orow.iter_mut().zip(brow) {
                    *o += aik * bkj;
                }
            }
        }
        let rg = self.tracked(&[a, b]);
        self.push(
            "matmul",
            Tensor {
                shape: vec![p, r],
                data: out,
            },
            Op::MatMul(a, b),
            rg,
        )
    }

    /// Matrix–vector product `A x` for `A: p×q`, `x: q`.
    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let (ta, tx) = (self.value(a), self.value(x));
        check_rank("matvec", ta, 2)?;
        check_rank("matvec", tx, 1)?;
        let q = ta.shape[1];
        if tx.shape[0] != q {
            return Err(AutogradError::ShapeMismatch {
                op: "matvec",
                left: ta.shape.clone(),
                right: tx.shape.clone(),
            });
        }
        let out: Vec<f64> = ta
            .data
            .chunks_exact(q)
            .map(|row| row.iter().zip(&tx.data).map(|(w, v)| w * v).sum())
            .collect();
        let rg = self.tracked(&[a, x]);
        self.push("matvec", Tensor::vector(out), Op::MatVec(a, x), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(AutogradError::ShapeMismatch {
                op,
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let shape = ta.shape.clone();
        let rg = self.tracked(&[a, b]);
        self.push("add", Tensor { shape, data }, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let shape = ta.shape.clone();
        let rg = self.tracked(&[a, b]);
        self.push("mul", Tensor { shape, data }, Op::Mul(a, b), rg)
    }

    /// Joins two vectors end to end.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_rank("concat", ta, 1)?;
        check_rank("concat", tb, 1)?;
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        data.extend_from_slice(&ta.data);
        data.extend_from_slice(&tb.data);
        let rg = self.tracked(&[a, b]);
        self.push("concat", Tensor::vector(data), Op::Concat(a, b), rg)
    }

    /// Joins two matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_rank("concat_cols", ta, 2)?;
        check_rank("concat_cols", tb, 2)?;
        if ta.shape[0] != tb.shape[0] {
            return Err(AutogradError::ShapeMismatch {
                op: "concat_cols",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let (n, p, q) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut data = Vec::with_capacity(n * (p + q));
        for r in 0..n {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let rg = self.tracked(&[a, b]);
        self.push(
            "concat_cols",
            Tensor {
                shape: vec![n, p + q],
                data,
            },
            Op::ConcatCols(a, b),
            rg,
        )
    }

    /// Elements `start..start + len` of a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        check_rank("slice", ta, 1)?;
        if start + len > ta.len() {
            return Err(AutogradError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                size: ta.len(),
            });
        }
        let data = ta.data[start..start + len].to_vec();
        let rg = self.tracked(&[a]);
        self.push("slice", Tensor::vector(data), Op::Slice(a, start), rg)
    }

    /// Row `r` of a matrix as a vector.
    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        let ta = self.value(a);
        check_rank("row", ta, 2)?;
        if r >= ta.shape[0] {
            return Err(AutogradError::IndexOutOfRange {
                op: "row",
                index: r,
                size: ta.shape[0],
            });
        }
        let data = ta.row(r).to_vec();
        let rg = self.tracked(&[a]);
        self.push("row", Tensor::vector(data), Op::Row(a, r), rg)
    }

    /// Stacks vectors of length `width` into a matrix; `None` rows are zero.
    pub fn stack_rows(&mut self, rows: Vec<Option<Var>>, width: usize) -> Result<Var> {
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in &rows {
            match r {
                Some(v) => {
                    let t = self.value(*v);
                    check_rank("stack_rows", t, 1)?;
                    if t.len() != width {
                        return Err(AutogradError::ShapeMismatch {
                            op: "stack_rows",
                            left: vec![width],
                            right: t.shape.clone(),
                        });
                    }
                    data.extend_from_slice(&t.data);
                }
                None => data.extend(std::iter::repeat_n(0.0, width)),
            }
        }
        let present: Vec<Var> = rows.iter().flatten().copied().collect();
        let rg = self.tracked(&present);
        let n = rows.len();
        self.push(
            "stack_rows",
            Tensor {
                shape: vec![n, width],
                data,
            },
            Op::StackRows(rows),
            rg,
        )
    }

    fn unary(
        &mut self,
        op_name: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data.iter().map(|&x| f(x)).collect();
        let shape = ta.shape.clone();
        let rg = self.tracked(&[a]);
        self.push(op_name, Tensor { shape, data }, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    /// Numerically stable softmax of a non-empty vector.
    pub fn softmax(&mut self, z: Var) -> Result<Var> {
        let tz = self.value(z);
        check_rank("softmax", tz, 1)?;
        if tz.is_empty() {
            return Err(AutogradError::RankError {
                op: "softmax",
                expected: 1,
                shape: tz.shape.clone(),
            });
        }
        let max = tz.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = tz.data.iter().map(|&v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let data = exps.into_iter().map(|e| e / total).collect();
        let rg = self.tracked(&[z]);
        self.push("softmax", Tensor::vector(data), Op::Softmax(z), rg)
    }

    /// `-ln(max(probs[target], 1e-12))`.
    pub fn cross_entropy(&mut self, probs: Var, target: usize) -> Result<Var> {
        let tp = self.value(probs);
        check_rank("cross_entropy", tp, 1)?;
        if target >= tp.len() {
            return Err(AutogradError::IndexOutOfRange {
                op: "cross_entropy",
                index: target,
                size: tp.len(),
            });
        }
        let loss = -tp.data[target].max(PROB_FLOOR).ln();
        let rg = self.tracked(&[probs]);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy(probs, target),
            rg,
        )
    }

    /// Inverted dropout. Returns `a` unchanged outside training or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutogradError::InvalidRate(rate));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let ta = self.value(a);
        let mask: Vec<f64> = (0..ta.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = ta.data.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = ta.shape.clone();
        let rg = self.tracked(&[a]);
        self.push("dropout", Tensor { shape, data }, Op::Dropout(a, mask), rg)
    }

    /// Column-wise max over the first `true_length` rows of an `n×d` matrix.
    /// Ties go to the earliest row; `true_length == 0` yields zeros.
    pub fn temporal_max_pool(&mut self, h: Var, true_length: usize) -> Result<Var> {
        let th = self.value(h);
        check_rank("temporal_max_pool", th, 2)?;
        let (n, d) = (th.shape[0], th.shape[1]);
        if true_length > n {
            return Err(AutogradError::IndexOutOfRange {
                op: "temporal_max_pool",
                index: true_length,
                size: n,
            });
        }
        let mut out = vec![0.0; d];
        let mut arg = vec![None; d];
        for j in 0..d {
            for r in 0..true_length {
                let v = th.data[r * d + j];
                if arg[j].is_none() || v > out[j] {
                    out[j] = v;
                    arg[j] = Some(r);
                }
            }
        }
        let rg = self.tracked(&[h]);
        self.push(
            "temporal_max_pool",
            Tensor::vector(out),
            Op::MaxPool(h, arg),
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        let rg = self.tracked(&[a]);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Embedding lookup: row `t` of the result is row `ids[t]` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        check_rank("gather", tt, 2)?;
        let (v, d) = (tt.shape[0], tt.shape[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(AutogradError::IndexOutOfRange {
                    op: "gather",
                    index: id,
                    size: v,
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        let rg = self.tracked(&[table]);
        self.push(
            "gather",
            Tensor {
                shape: vec![ids.len(), d],
                data,
            },
            Op::Gather(table, ids.to_vec()),
            rg,
        )
    }

    /// Propagates gradients from a scalar `loss` to every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(AutogradError::BackwardAlreadyRun);
        }
        let lt = self.value(loss);
        if lt.len() != 1 || lt.rank() > 1 {
            return Err(AutogradError::NotScalar(lt.shape.clone()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        // Lazily allocated accumulator for a parent that tracks gradients.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (p, q, r) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                acc(*a, &mut |ga| {
                    for i in 0..p {
                        for k in 0..q {
                            let mut s = 0.0;
                            for j in 0..r {
                                s += g[i * r + j] * tb.data[k * r + j];
                            }
                            ga[i * q + k] += s;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..p {
                        for k in 0..q {
                            let aik = ta.data[i * q + k];
                            for j in 0..r {
                                gb[k * r + j] += aik * g[i * r + j];
                            }
                        }
                    }
                });
            }
            Op::MatVec(a, x) => {
                let (ta, tx) = (&nodes[a.0].value, &nodes[x.0].value);
                let q = ta.shape[1];
                acc(*a, &mut |ga| {
                    for (row, &gi) in ga.chunks_exact_mut(q).zip(g) {
                        if gi == 0.0 {
                            continue;
                        }
                        for (w, &xv) in row.iter_mut().zip(&tx.data) {
                            *w += gi * xv;
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for (row, &gi) in ta.data.chunks_exact(q).zip(g) {
                        if gi == 0.0 {
                            continue;
                        }
                        for (o, &w) in gx.iter_mut().zip(row) {
                            *o += gi * w;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |ga| {
                    for ((o, gi), y) in ga.iter_mut().zip(g).zip(&tb.data) {
                        *o += gi * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, gi), x) in gb.iter_mut().zip(g).zip(&ta.data) {
                        *o += gi * x;
                    }
                });
            }
            Op::Concat(a, b) => {
                let p = nodes[a.0].value.len();
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(&g[..p]).for_each(|(o, x)| *o += x)
                });
                acc(*b, &mut |gb| {
                    gb.iter_mut().zip(&g[p..]).for_each(|(o, x)| *o += x)
                });
            }
            Op::ConcatCols(a, b) => {
                let p = nodes[a.0].value.shape[1];
                let q = nodes[b.0].value.shape[1];
                acc(*a, &mut |ga| {
                    for (dst, src) in ga.chunks_exact_mut(p).zip(g.chunks_exact(p + q)) {
                        dst.iter_mut().zip(&src[..p]).for_each(|(o, x)| *o += x);
                    }
                });
                acc(*b, &mut |gb| {
                    for (dst, src) in gb.chunks_exact_mut(q).zip(g.chunks_exact(p + q)) {
                        dst.iter_mut().zip(&src[p..]).for_each(|(o, x)| *o += x);
                    }
                });
            }
            Op::Slice(a, start) => {
                let start = *start;
                acc(*a, &mut |ga| {
                    ga[start..start + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(o, x)| *o += x)
                });
            }
            Op::Row(a, r) => {
                let d = g.len();
                let r = *r;
                acc(*a, &mut |ga| {
                    ga[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(o, x)| *o += x)
                });
            }
            Op::StackRows(rows) => {
                let width = node.value.shape[1];
                for (r, v) in rows.iter().enumerate() {
                    if let Some(v) = v {
                        let src = &g[r * width..(r + 1) * width];
                        acc(*v, &mut |gv| {
                            gv.iter_mut().zip(src).for_each(|(o, x)| *o += x)
                        });
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value.data;
                acc(*a, &mut |ga| {
                    for ((o, gi), s) in ga.iter_mut().zip(g).zip(y) {
                        *o += gi * s * (1.0 - s);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value.data;
                acc(*a, &mut |ga| {
                    for ((o, gi), t) in ga.iter_mut().zip(g).zip(y) {
                        *o += gi * (1.0 - t * t);
                    }
                });
            }
            Op::Relu(a) => {
                let x = &nodes[a.0].value.data;
                acc(*a, &mut |ga| {
                    for ((o, gi), xv) in ga.iter_mut().zip(g).zip(x) {
                        if *xv > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Softmax(z) => {
                let y = &node.value.data;
                let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                acc(*z, &mut |gz| {
                    for ((o, gi), yi) in gz.iter_mut().zip(g).zip(y) {
                        *o += yi * (gi - dot);
                    }
                });
            }
            Op::CrossEntropy(p, target) => {
                let pt = nodes[p.0].value.data[*target];
                if pt > PROB_FLOOR {
                    let t = *target;
                    acc(*p, &mut |gp| gp[t] -= g[0] / pt);
                }
            }
            Op::Dropout(a, mask) => {
                acc(*a, &mut |ga| {
                    for ((o, gi), m) in ga.iter_mut().zip(g).zip(mask) {
                        *o += gi * m;
                    }
                });
            }
            Op::MaxPool(h, arg) => {
                let d = arg.len();
                acc(*h, &mut |gh| {
                    for (j, r) in arg.iter().enumerate() {
                        if let Some(r) = r {
                            gh[r * d + j] += g[j];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Gather(table, ids) => {
                let d = nodes[table.0].value.shape[1];
                acc(*table, &mut |gt| {
                    for (t, &id) in ids.iter().enumerate() {
                        let src = &g[t * d..(t + 1) * d];
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(o, x)| *o += x);
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Checks analytic gradients of `f` (which builds a scalar from the given
    /// leaves) against central differences.
    fn grad_check(inputs: Vec<Tensor>, tol: f64, f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
        let h = 1e-5;
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| g.leaf(t.clone(), true).unwrap())
            .collect();
        let loss = f(&mut g, &vars).unwrap();
        g.backward(loss).unwrap();
        for (k, t) in inputs.iter().enumerate() {
            let analytic = g
                .grad(vars[k])
                .map(|s| s.to_vec())
                .unwrap_or(vec![0.0; t.len()]);
            for (e, &a) in analytic.iter().enumerate() {
                let eval = |delta: f64| {
                    let mut g2 = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, tj)| {
                            let mut tj = tj.clone();
                            if j == k {
                                tj.data_mut()[e] += delta;
                            }
                            g2.leaf(tj, false).unwrap()
                        })
                        .collect();
                    let l = f(&mut g2, &vs).unwrap();
                    g2.value(l).data()[0]
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (a - numeric).abs() / denom < tol || (a - numeric).abs() < 1e-9,
                    "input {k} elem {e}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_tensor(&mut rng, &[3, 4]);
        let b = random_tensor(&mut rng, &[4, 2]);
        let mut g = Graph::new();
        let (va, vb) = (
            g.constant(a.clone()).unwrap(),
            g.constant(b.clone()).unwrap(),
        );
        let c = g.matmul(va, vb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.data()[i * 4 + k] * b.data()[k * 2 + j];
                }
                assert!((g.value(c).data()[i * 2 + j] - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut g = Graph::new();
        let eye = g
            .constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let a = g
            .constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        let c = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(c), g.value(a));

        let x = g
            .constant(Tensor::matrix(1, 1, vec![2.0]).unwrap())
            .unwrap();
        let y = g
            .constant(Tensor::matrix(1, 1, vec![3.0]).unwrap())
            .unwrap();
        let z = g.matmul(x, y).unwrap();
        assert_eq!(g.value(z).data(), &[6.0]);

        let bad = g.matmul(a, a);
        assert!(matches!(bad, Err(AutogradError::ShapeMismatch { .. })));
    }

    #[test]
    fn add_and_mul_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_tensor(&mut rng, &[2, 3]);
        let mut g = Graph::new();
        let va = g.constant(a.clone()).unwrap();
        let zero = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let one = g
            .constant(Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap())
            .unwrap();
        let s = g.add(va, zero).unwrap();
        let p = g.mul(va, one).unwrap();
        assert_eq!(g.value(s), &a);
        assert_eq!(g.value(p), &a);

        let b = random_tensor(&mut rng, &[2, 3]);
        let vb = g.constant(b.clone()).unwrap();
        let s = g.add(va, vb).unwrap();
        let p = g.mul(va, vb).unwrap();
        for i in 0..6 {
            assert_eq!(g.value(s).data()[i], a.data()[i] + b.data()[i]);
            assert_eq!(g.value(p).data()[i], a.data()[i] * b.data()[i]);
        }
    }

    #[test]
    fn concat_orders_and_checks_rank() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0])).unwrap();
        let b = g.constant(Tensor::vector(vec![2.0])).unwrap();
        let c = g.concat(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0]);

        let l = g.constant(Tensor::vector(vec![0.5; 128])).unwrap();
        let r = g.constant(Tensor::vector(vec![0.25; 128])).unwrap();
        let c = g.concat(l, r).unwrap();
        assert_eq!(g.value(c).shape(), &[256]);

        let m = g.constant(Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(
            g.concat(m, a),
            Err(AutogradError::RankError { .. })
        ));
    }

    #[test]
    fn activations_at_known_points() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 2.0, 0.0])).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0]);
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(s).data()[2], 0.5);
        let t = g.tanh(x).unwrap();
        assert_eq!(g.value(t).data()[2], 0.0);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0, 1.0]), true).unwrap();
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_contracts() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let p = g.softmax(z).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);

        let a = g.constant(Tensor::vector(vec![0.3, -1.2, 2.0])).unwrap();
        let b = g.constant(Tensor::vector(vec![10.3, 8.8, 12.0])).unwrap();
        let (pa, pb) = (g.softmax(a).unwrap(), g.softmax(b).unwrap());
        for (x, y) in g.value(pa).data().iter().zip(g.value(pb).data()) {
            assert!((x - y).abs() < 1e-12);
        }

        let z = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let p = g.softmax(z).unwrap();
        let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let direct = [1f64.exp() / denom, 2f64.exp() / denom, 3f64.exp() / denom];
        for (x, y) in g.value(p).data().iter().zip(direct) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((g.value(p).data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_is_stable_at_extremes() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![-50.0, 50.0, 0.0])).unwrap();
        let p = g.softmax(z).unwrap();
        assert!(g.value(p).is_finite());
        let l = g.cross_entropy(p, 0).unwrap();
        assert!(g.value(l).data()[0].is_finite());
    }

    #[test]
    fn cross_entropy_values() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::vector(vec![1.0, 0.0, 0.0])).unwrap();
        let l = g.cross_entropy(p, 0).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-15);
        let l = g.cross_entropy(p, 1).unwrap();
        assert!((g.value(l).data()[0] - (-(1e-12f64).ln())).abs() < 1e-9);

        let u = g.constant(Tensor::vector(vec![0.25; 4])).unwrap();
        for t in 0..4 {
            let l = g.cross_entropy(u, t).unwrap();
            assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);
        }
        assert!(matches!(
            g.cross_entropy(u, 4),
            Err(AutogradError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_probs_minus_onehot() {
        let mut g = Graph::new();
        let z = g
            .leaf(Tensor::vector(vec![0.2, -0.7, 1.1, 0.05]), true)
            .unwrap();
        let p = g.softmax(z).unwrap();
        let l = g.cross_entropy(p, 2).unwrap();
        g.backward(l).unwrap();
        let probs = g.value(p).data().to_vec();
        for (i, gi) in g.grad(z).unwrap().iter().enumerate() {
            let expect = probs[i] - if i == 2 { 1.0 } else { 0.0 };
            assert!((gi - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0; 8])).unwrap();
        assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(g.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        assert!(matches!(
            g.dropout(x, 1.0, true, &mut rng),
            Err(AutogradError::InvalidRate(_))
        ));

        let big = g.constant(Tensor::vector(vec![1.0; 100_000])).unwrap();
        for rate in [0.1, 0.2] {
            let y = g.dropout(big, rate, true, &mut rng).unwrap();
            let vals = g.value(y).data();
            let zeros = vals.iter().filter(|v| **v == 0.0).count() as f64 / vals.len() as f64;
            assert!((zeros - rate).abs() < 0.01, "rate {rate} observed {zeros}");
            let keep = 1.0 / (1.0 - rate);
            assert!(vals.iter().all(|v| *v == 0.0 || (*v - keep).abs() < 1e-12));
        }
    }

    fn naive_pool(h: &Tensor, len: usize) -> Vec<f64> {
        let d = h.shape()[1];
        let mut out = vec![0.0; d];
        for (j, o) in out.iter_mut().enumerate() {
            if len == 0 {
                continue;
            }
            let mut best = h.row(0)[j];
            for r in 1..len {
                best = best.max(h.row(r)[j]);
            }
            *o = best;
        }
        out
    }

    #[test]
    fn temporal_max_pool_excludes_padding() {
        let h = Tensor::matrix(4, 2, vec![-3.0, -1.0, -2.0, -5.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let mut g = Graph::new();
        let v = g.constant(h.clone()).unwrap();
        let p = g.temporal_max_pool(v, 2).unwrap();
        assert_eq!(g.value(p).data(), &[-2.0, -1.0]);
        assert_eq!(g.value(p).data(), naive_pool(&h, 2).as_slice());

        let p0 = g.temporal_max_pool(v, 0).unwrap();
        assert_eq!(g.value(p0).data(), &[0.0, 0.0]);

        let single = g
            .constant(Tensor::matrix(1, 3, vec![1.0, -2.0, 3.0]).unwrap())
            .unwrap();
        let p = g.temporal_max_pool(single, 1).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, -2.0, 3.0]);

        let konst = g
            .constant(Tensor::new(vec![3, 2], vec![0.7; 6]).unwrap())
            .unwrap();
        let p = g.temporal_max_pool(konst, 3).unwrap();
        assert_eq!(g.value(p).data(), &[0.7, 0.7]);
    }

    #[test]
    fn temporal_max_pool_matches_naive_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = rng.gen_range(1..8);
            let d = rng.gen_range(1..6);
            let len = rng.gen_range(0..=n);
            let h = random_tensor(&mut rng, &[n, d]);
            let mut g = Graph::new();
            let v = g.constant(h.clone()).unwrap();
            let p = g.temporal_max_pool(v, len).unwrap();
            assert_eq!(g.value(p).data(), naive_pool(&h, len).as_slice());
        }
    }

    #[test]
    fn max_pool_ties_take_earliest_row() {
        let mut g = Graph::new();
        let h = g
            .leaf(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap(), true)
            .unwrap();
        let p = g.temporal_max_pool(h, 2).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(h).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn backward_contracts() {
        let mut g = Graph::new();
        let w = g
            .leaf(
                Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
                true,
            )
            .unwrap();
        let s = g.sum(w).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0; 4]);
        assert_eq!(g.backward(s), Err(AutogradError::BackwardAlreadyRun));
        g.reset_grads();
        g.backward(s).unwrap();

        let mut g = Graph::new();
        let v = g.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        assert!(matches!(g.backward(v), Err(AutogradError::NotScalar(_))));
    }

    #[test]
    fn gather_accumulates_repeated_rows() {
        let mut g = Graph::new();
        let table = g
            .leaf(
                Tensor::matrix(3, 2, vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0]).unwrap(),
                true,
            )
            .unwrap();
        let x = g.gather(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(x).data(), &[3.0, 4.0, 0.0, 0.0, 3.0, 4.0]);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(matches!(
            g.gather(table, &[3]),
            Err(AutogradError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let mut g = Graph::new();
        assert!(matches!(
            g.leaf(Tensor::vector(vec![f64::NAN]), true),
            Err(AutogradError::NonFinite { .. })
        ));
        let big = g.constant(Tensor::vector(vec![1e200])).unwrap();
        assert!(matches!(
            g.mul(big, big),
            Err(AutogradError::NonFinite { op: "mul" })
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_tensor(&mut rng, &[3, 4]);
        let b = random_tensor(&mut rng, &[4, 2]);
        grad_check(vec![a.clone(), b], 1e-6, |g, v| {
            let c = g.matmul(v[0], v[1])?;
            let t = g.tanh(c)?;
            g.sum(t)
        });
        let x = random_tensor(&mut rng, &[4]);
        grad_check(vec![a.clone(), x.clone()], 1e-6, |g, v| {
            let y = g.matvec(v[0], v[1])?;
            let s = g.sigmoid(y)?;
            g.sum(s)
        });
        let p = random_tensor(&mut rng, &[3, 4]);
        grad_check(vec![a.clone(), p], 1e-6, |g, v| {
            let s = g.add(v[0], v[1])?;
            let m = g.mul(s, v[0])?;
            let t = g.tanh(m)?;
            g.sum(t)
        });
        let u = random_tensor(&mut rng, &[3]);
        grad_check(vec![x.clone(), u], 1e-6, |g, v| {
            let c = g.concat(v[0], v[1])?;
            let c2 = g.mul(c, c)?;
            let s = g.slice(c2, 2, 4)?;
            let t = g.tanh(s)?;
            g.sum(t)
        });
        let z = random_tensor(&mut rng, &[5]);
        grad_check(vec![z], 1e-6, |g, v| {
            let p = g.softmax(v[0])?;
            g.cross_entropy(p, 3)
        });
        let m1 = random_tensor(&mut rng, &[3, 2]);
        let m2 = random_tensor(&mut rng, &[3, 3]);
        grad_check(vec![m1, m2], 1e-6, |g, v| {
            let c = g.concat_cols(v[0], v[1])?;
            let r0 = g.row(c, 1)?;
            let r1 = g.row(c, 2)?;
            let st = g.stack_rows(vec![Some(r1), None, Some(r0)], 5)?;
            let t = g.tanh(st)?;
            let p = g.temporal_max_pool(t, 3)?;
            g.sum(p)
        });
        // relu away from the kink
        let r = Tensor::vector(vec![0.5, -0.4, 1.3, -2.0]);
        grad_check(vec![r], 1e-6, |g, v| {
            let y = g.relu(v[0])?;
            let y2 = g.mul(y, y)?;
            g.sum(y2)
        });
        let table = random_tensor(&mut rng, &[4, 3]);
        grad_check(vec![table], 1e-6, |g, v| {
            let x = g.gather(v[0], &[1, 3, 1])?;
            let t = g.tanh(x)?;
            g.sum(t)
        });
    }

    #[test]
    fn dropout_gradient_uses_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0; 50]), true).unwrap();
        let y = g.dropout(x, 0.3, true, &mut rng).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), g.value(y).data());
    }
}
