//! The reverse-mode differentiation tape.
//!
//! A [`Graph`] is an append-only record of operations: building an op
//! evaluates it immediately (checking the result for NaN/inf) and pushes
//! one node. [`Graph::backward`] walks the tape once in reverse insertion
//! order, which is a valid topological order by construction, and
//! accumulates adjoints into every node plus a per-parameter gradient map
//! (parameters bound at several nodes — shared weights — sum their
//! contributions).

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::store::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

enum Op {
    /// Constant leaf; no gradient flows out of it.
    Input,
    /// Parameter leaf bound from a [`ParamStore`].
    Param(ParamId),
    MatMul(Value, Value),
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    ScalarMul(Value, f64),
    ConcatCols(Vec<Value>),
    ConcatRows(Vec<Value>),
    Transpose(Value),
    Relu(Value),
    RowNormalize(Value),
    RowSoftmax(Value),
    /// Max over each consecutive block of rows; `argmax` remembers the
    /// winning input row per (output row, column).
    GroupMaxPool {
        x: Value,
        argmax: Vec<usize>,
    },
    MeanAll(Value),
    BroadcastRow(Value),
    GatherRows {
        x: Value,
        idx: Vec<usize>,
    },
    ScaleRows {
        x: Value,
        w: Value,
    },
    Detach,
    Bce {
        logits: Value,
        targets: Tensor,
    },
    Mse(Value, Value),
    Kl(Value, Value),
}

struct Node {
    op: Op,
    out: Tensor,
}

/// Append-only operation tape with immediate evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of a backward pass: adjoints for every reached node and the
/// summed gradient per parameter.
pub struct Gradients {
    node_grads: Vec<Option<Tensor>>,
    param_grads: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to a node (None if the node does
    /// not influence the loss).
    pub fn wrt(&self, v: Value) -> Option<&Tensor> {
        self.node_grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of the loss with respect to a parameter, summed over all
    /// nodes that bound it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_grads.get(&id.index())
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The evaluated tensor behind a node.
    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].out
    }

    fn push(&mut self, op: Op, out: Tensor, name: &str) -> Result<Value> {
        if !out.all_finite() {
            return Err(Error::Numeric(format!(
                "operation `{name}` produced a non-finite value"
            )));
        }
        self.nodes.push(Node { op, out });
        Ok(Value(self.nodes.len() - 1))
    }

    fn node(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].out
    }

    /// Bind a constant input tensor.
    pub fn input(&mut self, t: Tensor) -> Result<Value> {
        self.push(Op::Input, t, "input")
    }

    /// Bind a parameter from the store. The same parameter may be bound
    /// at several nodes; its gradient accumulates across all of them.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Value> {
        self.push(Op::Param(id), store.value(id).clone(), "param")
    }

    /// Matrix product `a x b`.
    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ta, tb) = (self.node(a), self.node(b));
        if ta.cols() != tb.rows() {
            return Err(Error::invalid(format!(
                "matmul shape mismatch: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = matmul_nn(ta, tb);
        self.push(Op::MatMul(a, b), out, "matmul")
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let out = zip_same_shape(self.node(a), self.node(b), "add", |x, y| x + y)?;
        self.push(Op::Add(a, b), out, "add")
    }

    /// Elementwise difference `a - b`.
    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        let out = zip_same_shape(self.node(a), self.node(b), "subtract", |x, y| x - y)?;
        self.push(Op::Sub(a, b), out, "subtract")
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        let out = zip_same_shape(self.node(a), self.node(b), "multiply", |x, y| x * y)?;
        self.push(Op::Mul(a, b), out, "multiply")
    }

    /// Multiply every entry by a constant.
    pub fn scalar_mul(&mut self, a: Value, c: f64) -> Result<Value> {
        let t = self.node(a);
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v * c).collect(),
        };
        self.push(Op::ScalarMul(a, c), out, "scalar-multiply")
    }

    /// Concatenate along columns (all parts share the row count).
    pub fn concat_cols(&mut self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let rows = self.node(parts[0]).rows();
        if parts.iter().any(|&p| self.node(p).rows() != rows) {
            return Err(Error::invalid("column concat requires equal row counts"));
        }
        let cols: usize = parts.iter().map(|&p| self.node(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.node(p).row(r));
            }
        }
        let out = Tensor {
            shape: vec![rows, cols],
            data,
        };
        self.push(Op::ConcatCols(parts.to_vec()), out, "concat-cols")
    }

    /// Concatenate along rows (all parts share the column count).
    pub fn concat_rows(&mut self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let cols = self.node(parts[0]).cols();
        if parts.iter().any(|&p| self.node(p).cols() != cols) {
            return Err(Error::invalid("row concat requires equal column counts"));
        }
        let rows: usize = parts.iter().map(|&p| self.node(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.node(p).data());
        }
        let out = Tensor {
            shape: vec![rows, cols],
            data,
        };
        self.push(Op::ConcatRows(parts.to_vec()), out, "concat-rows")
    }

    pub fn transpose(&mut self, a: Value) -> Result<Value> {
        let t = self.node(a);
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.get(i, j);
            }
        }
        let out = Tensor {
            shape: vec![c, r],
            data,
        };
        self.push(Op::Transpose(a), out, "transpose")
    }

    /// Elementwise `max(x, 0)`. The subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: Value) -> Result<Value> {
        let t = self.node(a);
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        };
        self.push(Op::Relu(a), out, "relu")
    }

    /// Scale each row to unit Euclidean norm; all-zero rows stay zero.
    pub fn row_l2_normalize(&mut self, a: Value) -> Result<Value> {
        let t = self.node(a);
        let (r, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = t.row(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                data.extend(row.iter().map(|v| v / n));
            } else {
                data.extend(std::iter::repeat(0.0).take(c));
            }
        }
        let out = Tensor {
            shape: vec![r, c],
            data,
        };
        self.push(Op::RowNormalize(a), out, "row-l2-normalize")
    }

    /// Softmax over each row (max-shifted for stability).
    pub fn row_softmax(&mut self, a: Value) -> Result<Value> {
        let t = self.node(a);
        let (r, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = t.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / s));
        }
        let out = Tensor {
            shape: vec![r, c],
            data,
        };
        self.push(Op::RowSoftmax(a), out, "row-softmax")
    }

    /// Column-wise max over each consecutive block of `group` rows.
    /// Gradient routes to the first row attaining each maximum.
    pub fn group_max_pool(&mut self, a: Value, group: usize) -> Result<Value> {
        let t = self.node(a);
        let (r, c) = (t.rows(), t.cols());
        if group == 0 || r % group != 0 {
            return Err(Error::invalid(format!(
                "group max pool: {r} rows not divisible into groups of {group}"
            )));
        }
        let out_rows = r / group;
        let mut data = vec![f64::NEG_INFINITY; out_rows * c];
        let mut argmax = vec![0usize; out_rows * c];
        for g in 0..out_rows {
            for k in 0..group {
                let src = g * group + k;
                let row = t.row(src);
                for j in 0..c {
                    if row[j] > data[g * c + j] {
                        data[g * c + j] = row[j];
                        argmax[g * c + j] = src;
                    }
                }
            }
        }
        let out = Tensor {
            shape: vec![out_rows, c],
            data,
        };
        self.push(Op::GroupMaxPool { x: a, argmax }, out, "group-max-pool")
    }

    /// Column-wise max over all rows (a single-group pool).
    pub fn max_pool_rows(&mut self, a: Value) -> Result<Value> {
        let rows = self.node(a).rows();
        self.group_max_pool(a, rows)
    }

    /// Mean of all entries, as a `1 x 1` tensor.
    pub fn mean_all(&mut self, a: Value) -> Result<Value> {
        let t = self.node(a);
        let mean = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Op::MeanAll(a), Tensor::zeros(1, 1).with(mean), "mean")
    }

    /// Repeat a `1 x c` row `rows` times.
    pub fn broadcast_row(&mut self, a: Value, rows: usize) -> Result<Value> {
        let t = self.node(a);
        if t.rows() != 1 {
            return Err(Error::invalid(format!(
                "broadcast-row expects a 1-row tensor, got {:?}",
                t.shape()
            )));
        }
        let c = t.cols();
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(t.row(0));
        }
        let out = Tensor {
            shape: vec![rows, c],
            data,
        };
        self.push(Op::BroadcastRow(a), out, "broadcast-row")
    }

    /// Select rows by index (repeats allowed). Gradients scatter-add back.
    pub fn gather_rows(&mut self, a: Value, idx: &[usize]) -> Result<Value> {
        let t = self.node(a);
        let (r, c) = (t.rows(), t.cols());
        if idx.iter().any(|&i| i >= r) {
            return Err(Error::invalid("gather-rows index out of range"));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor {
            shape: vec![idx.len(), c],
            data,
        };
        self.push(
            Op::GatherRows {
                x: a,
                idx: idx.to_vec(),
            },
            out,
            "gather-rows",
        )
    }

    /// Multiply row `i` of `a` by entry `i` of the column vector `w`.
    pub fn scale_rows(&mut self, a: Value, w: Value) -> Result<Value> {
        let (t, wt) = (self.node(a), self.node(w));
        if wt.cols() != 1 || wt.rows() != t.rows() {
            return Err(Error::invalid(format!(
                "scale-rows expects weights {}x1, got {:?}",
                t.rows(),
                wt.shape()
            )));
        }
        let (r, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let s = wt.get(i, 0);
            data.extend(t.row(i).iter().map(|v| v * s));
        }
        let out = Tensor {
            shape: vec![r, c],
            data,
        };
        self.push(Op::ScaleRows { x: a, w }, out, "scale-rows")
    }

    /// Copy a value while blocking gradient flow through it.
    pub fn detach(&mut self, a: Value) -> Result<Value> {
        let out = self.node(a).clone();
        let _ = a;
        self.push(Op::Detach, out, "detach")
    }

    /// Mean binary cross-entropy from logits against constant 0/1 targets,
    /// computed in the standard overflow-safe form.
    pub fn bce(&mut self, logits: Value, targets: &Tensor) -> Result<Value> {
        let z = self.node(logits);
        if !z.same_shape(targets) {
            return Err(Error::invalid(format!(
                "bce shape mismatch: logits {:?} vs targets {:?}",
                z.shape(),
                targets.shape()
            )));
        }
        if targets.data().iter().any(|&t| !(0.0..=1.0).contains(&t)) {
            return Err(Error::invalid("bce targets must lie in [0, 1]"));
        }
        let mut acc = 0.0;
        for (&zv, &tv) in z.data().iter().zip(targets.data()) {
            acc += zv.max(0.0) - zv * tv + (-zv.abs()).exp().ln_1p();
        }
        let out = Tensor::zeros(1, 1).with(acc / z.numel() as f64);
        self.push(
            Op::Bce {
                logits,
                targets: targets.clone(),
            },
            out,
            "bce",
        )
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ta, tb) = (self.node(a), self.node(b));
        if !ta.same_shape(tb) {
            return Err(Error::invalid(format!(
                "mse shape mismatch: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let acc: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let out = Tensor::zeros(1, 1).with(acc / ta.numel() as f64);
        self.push(Op::Mse(a, b), out, "mse")
    }

    /// Row-wise KL divergence `sum_c p log(p/q)`, averaged over rows.
    /// Both inputs must be row-stochastic (entries >= 0, rows summing to
    /// 1 within 1e-6); logs are clamped below at 1e-12.
    pub fn kl(&mut self, p: Value, q: Value) -> Result<Value> {
        let (tp, tq) = (self.node(p), self.node(q));
        if !tp.same_shape(tq) {
            return Err(Error::invalid(format!(
                "kl shape mismatch: {:?} vs {:?}",
                tp.shape(),
                tq.shape()
            )));
        }
        for (side, t) in [("first", tp), ("second", tq)] {
            for r in 0..t.rows() {
                let row = t.row(r);
                if row.iter().any(|&v| v < 0.0) {
                    return Err(Error::invalid(format!(
                        "kl {side} input has a negative entry in row {r}"
                    )));
                }
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(Error::invalid(format!(
                        "kl {side} input row {r} sums to {s}, not 1"
                    )));
                }
            }
        }
        let rows = tp.rows() as f64;
        let mut acc = 0.0;
        for (&pv, &qv) in tp.data().iter().zip(tq.data()) {
            acc += pv * (pv.max(KL_FLOOR).ln() - qv.max(KL_FLOOR).ln());
        }
        let out = Tensor::zeros(1, 1).with(acc / rows);
        self.push(Op::Kl(p, q), out, "kl")
    }

    /// Reverse pass from a scalar loss. Walks the tape once in reverse
    /// insertion order and returns per-node adjoints plus summed
    /// per-parameter gradients.
    pub fn backward(&mut self, loss: Value) -> Result<Gradients> {
        if self.node(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.node(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::zeros(1, 1).with(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_inputs(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut param_grads: HashMap<usize, Tensor> = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &grads[i] {
                    match param_grads.entry(id.index()) {
                        std::collections::hash_map::Entry::Occupied(mut e) => {
                            let acc = e.get_mut();
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(g.clone());
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            node_grads: grads,
            param_grads,
        })
    }

    /// Push node `i`'s adjoint `g` into its inputs.
    fn accumulate_inputs(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let add_to = |grads: &mut [Option<Tensor>], v: Value, delta: Tensor| {
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Input | Op::Param(_) | Op::Detach => {}
            Op::MatMul(a, b) => {
                let da = matmul_nt(g, self.node(*b));
                let db = matmul_tn(self.node(*a), g);
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.node(*a), self.node(*b));
                add_to(grads, *a, g.zip_with(tb, |gv, bv| gv * bv));
                add_to(grads, *b, g.zip_with(ta, |gv, av| gv * av));
            }
            Op::ScalarMul(a, c) => add_to(grads, *a, g.map(|v| v * c)),
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut col0 = 0;
                for &p in parts {
                    let c = self.node(p).cols();
                    let mut d = Tensor::zeros(rows, c);
                    for r in 0..rows {
                        for j in 0..c {
                            d.set(r, j, g.get(r, col0 + j));
                        }
                    }
                    add_to(grads, p, d);
                    col0 += c;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut row0 = 0;
                for &p in parts {
                    let r = self.node(p).rows();
                    let mut d = Tensor::zeros(r, cols);
                    d.data_mut()
                        .copy_from_slice(&g.data()[row0 * cols..(row0 + r) * cols]);
                    add_to(grads, p, d);
                    row0 += r;
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (g.rows(), g.cols());
                let mut d = Tensor::zeros(c, r);
                for i2 in 0..r {
                    for j in 0..c {
                        d.set(j, i2, g.get(i2, j));
                    }
                }
                add_to(grads, *a, d);
            }
            Op::Relu(a) => {
                let x = self.node(*a);
                add_to(grads, *a, g.zip_with(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            Op::RowNormalize(a) => {
                // y = x / |x|; dx = (dy - y * <dy, y>) / |x| per row.
                let x = self.node(*a);
                let y = &self.nodes[i].out;
                let (r, c) = (x.rows(), x.cols());
                let mut d = Tensor::zeros(r, c);
                for row in 0..r {
                    let n = x.row(row).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n == 0.0 {
                        continue;
                    }
                    let dot: f64 = g
                        .row(row)
                        .iter()
                        .zip(y.row(row))
                        .map(|(a2, b2)| a2 * b2)
                        .sum();
                    for j in 0..c {
                        d.set(row, j, (g.get(row, j) - y.get(row, j) * dot) / n);
                    }
                }
                add_to(grads, *a, d);
            }
            Op::RowSoftmax(a) => {
                // dx = y * (dy - <dy, y>) per row.
                let y = &self.nodes[i].out;
                let (r, c) = (y.rows(), y.cols());
                let mut d = Tensor::zeros(r, c);
                for row in 0..r {
                    let dot: f64 = g
                        .row(row)
                        .iter()
                        .zip(y.row(row))
                        .map(|(a2, b2)| a2 * b2)
                        .sum();
                    for j in 0..c {
                        d.set(row, j, y.get(row, j) * (g.get(row, j) - dot));
                    }
                }
                add_to(grads, *a, d);
            }
            Op::GroupMaxPool { x, argmax } => {
                let xt = self.node(*x);
                let c = xt.cols();
                let mut d = Tensor::zeros(xt.rows(), c);
                for or in 0..g.rows() {
                    for j in 0..c {
                        let src = argmax[or * c + j];
                        let cur = d.get(src, j);
                        d.set(src, j, cur + g.get(or, j));
                    }
                }
                add_to(grads, *x, d);
            }
            Op::MeanAll(a) => {
                let x = self.node(*a);
                let scale = g.data()[0] / x.numel() as f64;
                add_to(grads, *a, Tensor {
                    shape: x.shape().to_vec(),
                    data: vec![scale; x.numel()],
                });
            }
            Op::BroadcastRow(a) => {
                let c = g.cols();
                let mut d = Tensor::zeros(1, c);
                for r in 0..g.rows() {
                    for j in 0..c {
                        let cur = d.get(0, j);
                        d.set(0, j, cur + g.get(r, j));
                    }
                }
                add_to(grads, *a, d);
            }
            Op::GatherRows { x, idx } => {
                let xt = self.node(*x);
                let c = xt.cols();
                let mut d = Tensor::zeros(xt.rows(), c);
                for (out_r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        let cur = d.get(src, j);
                        d.set(src, j, cur + g.get(out_r, j));
                    }
                }
                add_to(grads, *x, d);
            }
            Op::ScaleRows { x, w } => {
                let (xt, wt) = (self.node(*x), self.node(*w));
                let (r, c) = (xt.rows(), xt.cols());
                let mut dx = Tensor::zeros(r, c);
                let mut dw = Tensor::zeros(r, 1);
                for row in 0..r {
                    let s = wt.get(row, 0);
                    let mut acc = 0.0;
                    for j in 0..c {
                        dx.set(row, j, g.get(row, j) * s);
                        acc += g.get(row, j) * xt.get(row, j);
                    }
                    dw.set(row, 0, acc);
                }
                add_to(grads, *x, dx);
                add_to(grads, *w, dw);
            }
            Op::Bce { logits, targets } => {
                let z = self.node(*logits);
                let n = z.numel() as f64;
                let scale = g.data()[0] / n;
                let d = Tensor {
                    shape: z.shape().to_vec(),
                    data: z
                        .data()
                        .iter()
                        .zip(targets.data())
                        .map(|(&zv, &tv)| (sigmoid(zv) - tv) * scale)
                        .collect(),
                };
                add_to(grads, *logits, d);
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.node(*a), self.node(*b));
                let scale = 2.0 * g.data()[0] / ta.numel() as f64;
                let diff: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| (x - y) * scale)
                    .collect();
                add_to(grads, *a, Tensor {
                    shape: ta.shape().to_vec(),
                    data: diff.clone(),
                });
                add_to(grads, *b, Tensor {
                    shape: tb.shape().to_vec(),
                    data: diff.into_iter().map(|v| -v).collect(),
                });
            }
            Op::Kl(p, q) => {
                let (tp, tq) = (self.node(*p), self.node(*q));
                let rows = tp.rows() as f64;
                let scale = g.data()[0] / rows;
                let mut dp = Tensor::zeros(tp.rows(), tp.cols());
                let mut dq = Tensor::zeros(tp.rows(), tp.cols());
                for (k, (&pv, &qv)) in tp.data().iter().zip(tq.data()).enumerate() {
                    let pc = pv.max(KL_FLOOR);
                    let qc = qv.max(KL_FLOOR);
                    let mut gp = pc.ln() - qc.ln();
                    if pv > KL_FLOOR {
                        gp += 1.0;
                    }
                    dp.data_mut()[k] = gp * scale;
                    dq.data_mut()[k] = if qv > KL_FLOOR { -pv / qc * scale } else { 0.0 };
                }
                add_to(grads, *p, dp);
                add_to(grads, *q, dq);
            }
        }
    }
}

const KL_FLOOR: f64 = 1e-12;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    fn with(mut self, v: f64) -> Tensor {
        self.data_mut()[0] = v;
        self
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape().to_vec(),
            data: self.data().iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape().to_vec(),
            data: self
                .data()
                .iter()
                .zip(other.data())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }
}

fn zip_same_shape(
    a: &Tensor,
    b: &Tensor,
    name: &str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if !a.same_shape(b) {
        return Err(Error::invalid(format!(
            "{name} shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.zip_with(b, f))
}

/// `a x b` with no transposition.
fn matmul_nn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        for kk in 0..k {
            let av = ad[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// `a x b^T`.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    debug_assert_eq!(k, b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let brow = b.row(j);
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// `a^T x b`.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    debug_assert_eq!(k, b.rows());
    let mut out = vec![0.0; m * n];
    for kk in 0..k {
        let arow = a.row(kk);
        let brow = b.row(kk);
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * brow[j];
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}
