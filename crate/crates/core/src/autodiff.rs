//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass in execution order.
//! Inputs of a node always have smaller indices than the node itself, so a
//! single reverse sweep in [`Tape::backward`] visits every node after all of
//! its consumers and accumulates each leaf's gradient once per use.
//!
//! Model parameters enter the tape through [`Tape::param`], which references
//! the [`ParamStore`] instead of copying it; their gradients come back keyed by
//! [`ParamId`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Lower clamp applied to probabilities inside cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<S> {
    Owned(Tensor<S>),
    Param(ParamId),
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, S),
    MulConst(Var, Vec<S>),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    CrossEntropy { probs: Var, labels: Vec<usize> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<S> },
    MaxOverTime { x: Var, argmax: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Gather { table: Var, ids: Vec<usize> },
    Conv1d { x: Var, filters: Var, bias: Var },
    Concat(Var, Var),
    SliceCols { x: Var, start: usize },
    TimeStep { x: Var, t: usize },
    Stack(Vec<Var>),
    SelectRows { mask: Vec<bool>, on: Var, off: Var },
    Reshape(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, inv_std: Vec<S>, batch_stats: bool },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Softmax(..) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::MaxOverTime { .. } => "reduce_max_over_time",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Gather { .. } => "embedding_lookup",
            Op::Conv1d { .. } => "conv1d",
            Op::Concat(..) => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::TimeStep { .. } => "time_step",
            Op::Stack(..) => "stack_time",
            Op::SelectRows { .. } => "select_rows",
            Op::Reshape(..) => "reshape",
            Op::BatchNorm { batch_stats: true, .. } => "batch_norm",
            Op::BatchNorm { batch_stats: false, .. } => "batch_norm_eval",
        }
    }
}

struct Node<S> {
    value: Value<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape<'p, S: Scalar> {
    params: Option<&'p ParamStore<S>>,
    nodes: Vec<Node<S>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<S: Scalar> Default for Tape<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Shape `[B, T, d]` view of a rank-2 or rank-3 sequence tensor.
fn seq_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [t, d] => Some((1, t, d)),
        [b, t, d] => Some((b, t, d)),
        _ => None,
    }
}

impl<'p, S: Scalar> Tape<'p, S> {
    pub fn new() -> Self {
        Tape {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore<S>) -> Self {
        Tape {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self
                .params
                .expect("param node recorded without a store")
                .get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// First recorded op (leaves excluded) whose value contains NaN or ±Inf.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        (0..self.nodes.len())
            .map(Var)
            .filter(|v| !matches!(self.nodes[v.0].op, Op::Leaf))
            .find(|&v| !self.value(v).all_finite())
            .map(|v| (v, self.op_name(v)))
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Tape::backward`].
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Registers a store parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.params.expect("Tape::param needs Tape::with_params");
        let trainable = store.entry(id).trainable;
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[m×n] · b[n×p]`. A rank-1 `a` is treated as a single row and the
    /// result is rank-1 as well.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, n, vec_in) = match *sa {
            [n] => (1, n, true),
            [m, n] => (m, n, false),
            _ => return Err(dim_err("matmul", sa, sb)),
        };
        let p = match *sb {
            [n2, p] if n2 == n => p,
            _ => return Err(dim_err("matmul", sa, sb)),
        };
        let mut out = vec![S::zero(); m * p];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, n, p);
        let shape = if vec_in { vec![p] } else { vec![m, p] };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds a rank-1 `bias` to every row along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rank() != 1 || tb.len() != tx.last_dim() {
            return Err(dim_err("add_bias", tx.shape(), tb.shape()));
        }
        let n = tb.len();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % n])
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, c), rg)
    }

    /// Elementwise product with a constant of the same size (dropout masks).
    pub fn mul_const(&mut self, x: Var, mask: Vec<S>) -> Result<Var> {
        let tx = self.value(x);
        if mask.len() != tx.len() {
            return Err(dim_err("mul_const", tx.shape(), &[mask.len()]));
        }
        let data = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MulConst(x, mask), rg))
    }

    // ---- nonlinearities -------------------------------------------------

    /// `max(x, 0)` elementwise.
    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v < S::zero() { S::zero() } else { v });
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(logistic);
        let rg = self.rg(&[x]);
        self.push(t, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.tanh());
        let rg = self.rg(&[x]);
        self.push(t, Op::Tanh(x), rg)
    }

    /// Softmax along the last axis, shifted by the row maximum.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(tx.last_dim()) {
            softmax_in_place(row);
        }
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax(x), rg)
    }

    fn check_labels(&self, x: Var, labels: &[usize], name: &'static str) -> Result<usize> {
        let tx = self.value(x);
        let classes = tx.last_dim();
        if tx.rank() > 2 || tx.outer_len() != labels.len() {
            return Err(dim_err(name, tx.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index {
                what: "class label",
                index: bad,
                bound: classes,
            });
        }
        Ok(classes)
    }

    /// Mean over rows of `-ln(clamp(probs[label], 1e-12, 1))`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let classes = self.check_labels(probs, labels, "cross_entropy")?;
        let p = self.value(probs).data();
        let floor = S::of(PROB_FLOOR);
        let total: S = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -clamp_prob(p[r * classes + l], floor).ln())
            .sum();
        let loss = total / S::of(labels.len() as f64);
        let rg = self.rg(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Fused softmax + mean cross-entropy over the rows of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let classes = self.check_labels(logits, labels, "softmax_cross_entropy")?;
        let mut probs = self.value(logits).data().to_vec();
        for row in probs.chunks_mut(classes) {
            softmax_in_place(row);
        }
        let floor = S::of(PROB_FLOOR);
        let total: S = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -clamp_prob(probs[r * classes + l], floor).ln())
            .sum();
        let loss = total / S::of(labels.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ---- reductions -----------------------------------------------------

    /// Per-feature maximum over the time axis: `[T×F] → [F]` or
    /// `[B×T×F] → [B×F]`. Ties resolve to the earliest time step.
    pub fn reduce_max_over_time(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (b, t, f) = seq_dims(tx.shape()).ok_or_else(|| dim_err("reduce_max_over_time", tx.shape(), &[]))?;
        if t == 0 {
            return Err(Error::EmptySequence("reduce_max_over_time"));
        }
        let d = tx.data();
        let mut out = Vec::with_capacity(b * f);
        let mut argmax = Vec::with_capacity(b * f);
        for bi in 0..b {
            for fi in 0..f {
                let mut best = bi * t * f + fi;
                for ti in 1..t {
                    let idx = (bi * t + ti) * f + fi;
                    // NaN wins so it is never silently dropped
                    if d[idx] > d[best] || (d[idx].is_nan() && !d[best].is_nan()) {
                        best = idx;
                    }
                }
                out.push(d[best]);
                argmax.push(best);
            }
        }
        let shape = if tx.rank() == 2 { vec![f] } else { vec![b, f] };
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxOverTime { x, argmax }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: S = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s: S = tx.data().iter().copied().sum::<S>() / S::of(tx.len() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    // ---- indexing and layout -------------------------------------------

    /// Row gather `table[ids]` → `[n×d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let [vocab, dim] = *tt.shape() else {
            return Err(dim_err("embedding_lookup", tt.shape(), &[ids.len()]));
        };
        if ids.is_empty() {
            return Err(Error::EmptySequence("embedding_lookup"));
        }
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(&tt.data()[id * dim..(id + 1) * dim]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), dim], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Valid cross-correlation over time.
    ///
    /// `x` is `[T×d]` or `[B×T×d]`, `filters` is `[F×k×d]`, `bias` is `[F]`;
    /// the result is `[(T−k+1)×F]` (batched: `[B×(T−k+1)×F]`).
    pub fn conv1d(&mut self, x: Var, filters: Var, bias: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(filters), self.value(bias));
        let (b, t, d) = seq_dims(tx.shape()).ok_or_else(|| dim_err("conv1d", tx.shape(), tw.shape()))?;
        let [nf, k, dw] = *tw.shape() else {
            return Err(dim_err("conv1d", tx.shape(), tw.shape()));
        };
        if dw != d {
            return Err(dim_err("conv1d", tx.shape(), tw.shape()));
        }
        if tb.shape() != [nf] {
            return Err(dim_err("conv1d", tw.shape(), tb.shape()));
        }
        if t < k {
            return Err(Error::contract(format!(
                "conv1d needs at least {k} time steps, got {t}"
            )));
        }
        let steps = t - k + 1;
        let window = k * d;
        let (xd, wd, bd) = (tx.data(), tw.data(), tb.data());
        let mut out = Vec::with_capacity(b * steps * nf);
        for bi in 0..b {
            for ti in 0..steps {
                let start = (bi * t + ti) * d;
                let xs = &xd[start..start + window];
                for fi in 0..nf {
                    let ws = &wd[fi * window..(fi + 1) * window];
                    let mut acc = bd[fi];
                    for (&xv, &wv) in xs.iter().zip(ws) {
                        acc += xv * wv;
                    }
                    out.push(acc);
                }
            }
        }
        let shape = if tx.rank() == 2 { vec![steps, nf] } else { vec![b, steps, nf] };
        let rg = self.rg(&[x, filters, bias]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv1d { x, filters, bias }, rg))
    }

    /// Joins two tensors along the last axis; leading axes must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let lead_a = &ta.shape()[..ta.rank() - 1];
        if ta.rank() != tb.rank() || lead_a != &tb.shape()[..tb.rank() - 1] {
            return Err(dim_err("concat", ta.shape(), tb.shape()));
        }
        let (p, q) = (ta.last_dim(), tb.last_dim());
        let mut out = Vec::with_capacity(ta.len() + tb.len());
        for r in 0..ta.outer_len() {
            out.extend_from_slice(&ta.data()[r * p..(r + 1) * p]);
            out.extend_from_slice(&tb.data()[r * q..(r + 1) * q]);
        }
        let mut shape = lead_a.to_vec();
        shape.push(p + q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(a, b), rg))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.last_dim();
        if len == 0 || start + len > n {
            return Err(dim_err("slice_cols", tx.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(tx.outer_len() * len);
        for row in tx.data().chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().expect("rank ≥ 1") = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::SliceCols { x, start }, rg))
    }

    /// Slice `x[:, t, :]` of a `[B×T×d]` tensor.
    pub fn time_step(&mut self, x: Var, t: usize) -> Result<Var> {
        let tx = self.value(x);
        let [b, steps, d] = *tx.shape() else {
            return Err(dim_err("time_step", tx.shape(), &[t]));
        };
        if t >= steps {
            return Err(Error::Index {
                what: "time axis",
                index: t,
                bound: steps,
            });
        }
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            let s = (bi * steps + t) * d;
            out.extend_from_slice(&tx.data()[s..s + d]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![b, d], out)?, Op::TimeStep { x, t }, rg))
    }

    /// Stacks `T` tensors of shape `[B×d]` into `[B×T×d]`.
    pub fn stack_time(&mut self, steps: &[Var]) -> Result<Var> {
        let first = *steps.first().ok_or(Error::EmptySequence("stack_time"))?;
        let shape = self.shape(first).to_vec();
        let [b, d] = *shape.as_slice() else {
            return Err(dim_err("stack_time", &shape, &[]));
        };
        for &s in steps {
            if self.shape(s) != shape.as_slice() {
                return Err(dim_err("stack_time", &shape, self.shape(s)));
            }
        }
        let t = steps.len();
        let mut out = vec![S::zero(); b * t * d];
        for (ti, &s) in steps.iter().enumerate() {
            let src = self.value(s).data();
            for bi in 0..b {
                let dst = (bi * t + ti) * d;
                out[dst..dst + d].copy_from_slice(&src[bi * d..(bi + 1) * d]);
            }
        }
        let rg = self.rg(steps);
        Ok(self.push(Tensor::new(vec![b, t, d], out)?, Op::Stack(steps.to_vec()), rg))
    }

    /// Row `r` of the result comes from `on` where `mask[r]`, else from `off`.
    pub fn select_rows(&mut self, mask: &[bool], on: Var, off: Var) -> Result<Var> {
        let (ta, tb) = (self.value(on), self.value(off));
        if ta.shape() != tb.shape() || ta.outer_len() != mask.len() {
            return Err(dim_err("select_rows", ta.shape(), tb.shape()));
        }
        let n = ta.last_dim();
        let mut out = Vec::with_capacity(ta.len());
        for (r, &m) in mask.iter().enumerate() {
            let src = if m { ta } else { tb };
            out.extend_from_slice(&src.data()[r * n..(r + 1) * n]);
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(&[on, off]);
        Ok(self.push(
            t,
            Op::SelectRows {
                mask: mask.to_vec(),
                on,
                off,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    // ---- normalization --------------------------------------------------

    /// Batch normalization of `x[B×m]` with statistics of the batch itself
    /// (population variance). Returns the output and the batch mean and
    /// variance for running-statistic updates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<(Var, Vec<S>, Vec<S>)> {
        let tx = self.value(x);
        let [b, m] = *tx.shape() else {
            return Err(dim_err("batch_norm", tx.shape(), self.shape(gamma)));
        };
        if b < 2 {
            return Err(Error::contract(format!(
                "batch_norm in train mode needs a batch of at least 2, got {b}"
            )));
        }
        let d = tx.data();
        let bn = S::of(b as f64);
        let mut mean = vec![S::zero(); m];
        let mut var = vec![S::zero(); m];
        for row in d.chunks(m) {
            for (acc, &v) in mean.iter_mut().zip(row) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= bn);
        for row in d.chunks(m) {
            for j in 0..m {
                let c = row[j] - mean[j];
                var[j] += c * c;
            }
        }
        var.iter_mut().for_each(|v| *v /= bn);
        let v = self.normalize(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((v, mean, var))
    }

    /// Batch normalization with fixed statistics (inference).
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[S], var: &[S], eps: S) -> Result<Var> {
        self.normalize(x, gamma, beta, mean, var, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(&mut self, x: Var, gamma: Var, beta: Var, mean: &[S], var: &[S], eps: S, batch_stats: bool) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let m = tx.last_dim();
        if tx.rank() != 2 || tg.shape() != [m] || tb.shape() != [m] || mean.len() != m || var.len() != m {
            return Err(dim_err("batch_norm", tx.shape(), tg.shape()));
        }
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(tx.len());
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(m) {
            for j in 0..m {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(tg.data()[j] * h + tb.data()[j]);
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    // ---- reverse sweep --------------------------------------------------

    /// Propagates `d loss / d node` back to every leaf that requires a
    /// gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![S::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                if matches!(node.op, Op::Leaf) && node.requires_grad {
                    grads[i].take()
                } else {
                    None
                }
            })
            .collect();
        let param_vars = self.param_vars.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients {
            leaves,
            shapes: (0..n).map(|i| self.value(Var(i)).shape().to_vec()).collect(),
            param_vars,
        })
    }

    fn backprop_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, n) = match *ta.shape() {
                    [n] => (1, n),
                    [m, n] => (m, n),
                    _ => unreachable!(),
                };
                let p = tb.shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    gemm_nt_acc(g, tb.data(), ga, m, p, n);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm_tn_acc(ta.data(), g, gb, m, n, p);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        axpy(gv, g, S::one());
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, g, S::one());
                }
                if let Some(gb) = self.slot(grads, *b) {
                    axpy(gb, g, -S::one());
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(tb.data()) {
                        *o += gi * y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, &gi), &x) in gb.iter_mut().zip(g).zip(ta.data()) {
                        *o += gi * x;
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(gx) = self.slot(grads, *x) {
                    axpy(gx, g, S::one());
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        axpy(gb, row, S::one());
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.slot(grads, *x) {
                    axpy(gx, g, *c);
                }
            }
            Op::MulConst(x, mask) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, &gi), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *o += gi * m;
                    }
                }
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, &gi), &v) in gx.iter_mut().zip(g).zip(tx.data()) {
                        if v > S::zero() {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, &gi), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *o += gi * y * (S::one() - y);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, &gi), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *o += gi * (S::one() - y * y);
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let c = out.last_dim();
                    for ((gxr, gr), yr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                        let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((o, &gi), &y) in gxr.iter_mut().zip(gr).zip(yr) {
                            *o += y * (gi - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy { probs, labels } => {
                let tp = self.value(*probs);
                let c = tp.last_dim();
                let floor = S::of(PROB_FLOOR);
                let scale = g[0] / S::of(labels.len() as f64);
                if let Some(gp) = self.slot(grads, *probs) {
                    for (r, &l) in labels.iter().enumerate() {
                        let p = tp.data()[r * c + l];
                        if p >= floor && p <= S::one() {
                            gp[r * c + l] -= scale / p;
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let c = self.value(*logits).last_dim();
                let scale = g[0] / S::of(labels.len() as f64);
                if let Some(gl) = self.slot(grads, *logits) {
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let target = if j == l { S::one() } else { S::zero() };
                            gl[r * c + j] += scale * (probs[r * c + j] - target);
                        }
                    }
                }
            }
            Op::MaxOverTime { x, argmax } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (&gi, &idx) in g.iter().zip(argmax) {
                        gx[idx] += gi;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let s = g[0] / S::of(gx.len() as f64);
                    gx.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::Gather { table, ids } => {
                if let Some(gt) = self.slot(grads, *table) {
                    let d = out.last_dim();
                    for (row, &id) in g.chunks(d).zip(ids) {
                        axpy(&mut gt[id * d..(id + 1) * d], row, S::one());
                    }
                }
            }
            Op::Conv1d { x, filters, bias } => {
                let (tx, tw) = (self.value(*x), self.value(*filters));
                let (b, t, d) = seq_dims(tx.shape()).expect("checked in forward");
                let (nf, k) = (tw.shape()[0], tw.shape()[1]);
                let steps = t - k + 1;
                let window = k * d;
                if let Some(gb) = self.slot(grads, *bias) {
                    for row in g.chunks(nf) {
                        axpy(gb, row, S::one());
                    }
                }
                if let Some(gw) = self.slot(grads, *filters) {
                    for bi in 0..b {
                        for ti in 0..steps {
                            let start = (bi * t + ti) * d;
                            let xs = &tx.data()[start..start + window];
                            let grow = &g[(bi * steps + ti) * nf..(bi * steps + ti + 1) * nf];
                            for (fi, &gv) in grow.iter().enumerate() {
                                axpy(&mut gw[fi * window..(fi + 1) * window], xs, gv);
                            }
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    for bi in 0..b {
                        for ti in 0..steps {
                            let start = (bi * t + ti) * d;
                            let grow = &g[(bi * steps + ti) * nf..(bi * steps + ti + 1) * nf];
                            for (fi, &gv) in grow.iter().enumerate() {
                                let ws = &tw.data()[fi * window..(fi + 1) * window];
                                axpy(&mut gx[start..start + window], ws, gv);
                            }
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let p = self.value(*a).last_dim();
                let q = self.value(*b).last_dim();
                if let Some(ga) = self.slot(grads, *a) {
                    for (dst, row) in ga.chunks_mut(p).zip(g.chunks(p + q)) {
                        axpy(dst, &row[..p], S::one());
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (dst, row) in gb.chunks_mut(q).zip(g.chunks(p + q)) {
                        axpy(dst, &row[p..], S::one());
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.value(*x).last_dim();
                let len = out.last_dim();
                if let Some(gx) = self.slot(grads, *x) {
                    for (dst, row) in gx.chunks_mut(n).zip(g.chunks(len)) {
                        axpy(&mut dst[*start..start + len], row, S::one());
                    }
                }
            }
            Op::TimeStep { x, t } => {
                let [_, steps, d] = *self.value(*x).shape() else { unreachable!() };
                if let Some(gx) = self.slot(grads, *x) {
                    for (bi, row) in g.chunks(d).enumerate() {
                        let s = (bi * steps + t) * d;
                        axpy(&mut gx[s..s + d], row, S::one());
                    }
                }
            }
            Op::Stack(steps) => {
                let [_, t, d] = *out.shape() else { unreachable!() };
                for (ti, &s) in steps.iter().enumerate() {
                    if let Some(gs) = self.slot(grads, s) {
                        for (bi, dst) in gs.chunks_mut(d).enumerate() {
                            let src = (bi * t + ti) * d;
                            axpy(dst, &g[src..src + d], S::one());
                        }
                    }
                }
            }
            Op::SelectRows { mask, on, off } => {
                let n = out.last_dim();
                for (v, want) in [(*on, true), (*off, false)] {
                    if let Some(gv) = self.slot(grads, v) {
                        for (r, &m) in mask.iter().enumerate() {
                            if m == want {
                                axpy(&mut gv[r * n..(r + 1) * n], &g[r * n..(r + 1) * n], S::one());
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    axpy(gx, g, S::one());
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let m = out.last_dim();
                let rows = out.outer_len();
                let mut sum_g = vec![S::zero(); m];
                let mut sum_gx = vec![S::zero(); m];
                for (gr, hr) in g.chunks(m).zip(xhat.chunks(m)) {
                    for j in 0..m {
                        sum_g[j] += gr[j];
                        sum_gx[j] += gr[j] * hr[j];
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    axpy(gb, &sum_g, S::one());
                }
                if let Some(gg) = self.slot(grads, *gamma) {
                    axpy(gg, &sum_gx, S::one());
                }
                let tg = self.value(*gamma).data();
                if let Some(gx) = self.slot(grads, *x) {
                    let bn = S::of(rows as f64);
                    for ((dst, gr), hr) in gx.chunks_mut(m).zip(g.chunks(m)).zip(xhat.chunks(m)) {
                        for j in 0..m {
                            let k = tg[j] * inv_std[j];
                            if *batch_stats {
                                dst[j] += k / bn * (bn * gr[j] - sum_g[j] - hr[j] * sum_gx[j]);
                            } else {
                                dst[j] += k * gr[j];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Gradient accumulator for `v`, allocated on first use; `None` when `v`
    /// does not require a gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<S>>], v: Var) -> Option<&'g mut Vec<S>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); len]))
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<S> {
    leaves: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
    param_vars: Vec<(ParamId, Var)>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to leaf `v`; all zeros when `v` is unreachable
    /// from the loss.
    pub fn wrt(&self, v: Var) -> Tensor<S> {
        let shape = self.shapes[v.0].clone();
        match &self.leaves[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradient for a store parameter, if it was used on the tape.
    pub fn param(&self, id: ParamId) -> Option<&[S]> {
        self.param_vars
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.leaves[v.0].as_deref())
    }

    /// Moves parameter gradients out, keyed by parameter.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Vec<S>)> {
        let mut out: Vec<(ParamId, Vec<S>)> = self
            .param_vars
            .iter()
            .filter_map(|&(id, v)| self.leaves[v.0].take().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

#[inline]
fn axpy<S: Scalar>(dst: &mut [S], src: &[S], a: S) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[inline]
fn clamp_prob<S: Scalar>(p: S, floor: S) -> S {
    if p.is_nan() {
        return p;
    }
    p.max(floor).min(S::one())
}

#[inline]
pub(crate) fn logistic<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
