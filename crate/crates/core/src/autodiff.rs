//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node whose
//! inputs are earlier nodes, so the tape is acyclic by construction and a
//! single reverse sweep visits each node once. Graphs are rebuilt for each
//! forward pass; sequence lengths vary between examples.
//!
//! All kernels work row-wise: rank-1 tensors are one row, rank-2 tensors
//! are a batch of rows.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Constant,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Scale(Var, T),
    Concat(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    PickNll {
        x: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
    },
    Sum(Var),
    WeightedSum {
        weights: Var,
        items: Vec<Var>,
    },
    Select {
        mask: Vec<bool>,
        a: Var,
        b: Var,
    },
}

/// One recorded operation: its output value and how to differentiate it.
#[derive(Clone, Debug)]
struct TapeNode<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
}

#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<TapeNode<T>>,
    params: BTreeMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn out_shape(rank: usize, rows: usize, cols: usize) -> Vec<usize> {
    if rank == 1 {
        vec![cols]
    } else {
        vec![rows, cols]
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    /// Creates a graph with a leaf for every block of `store`.
    pub fn with_params(store: &ParamStore<T>) -> Self {
        let mut g = Self::new();
        g.bind(store);
        g
    }

    /// Registers a leaf for every parameter block. Blocks are shared, not
    /// copied.
    pub fn bind(&mut self, store: &ParamStore<T>) {
        for id in store.ids() {
            let var = self.push(store.block(id).value.clone(), Op::Param);
            self.params.insert(id, var);
        }
    }

    /// Leaf for a bound parameter block.
    ///
    /// Panics if the graph was not bound to a store containing `id`.
    pub fn p(&self, id: ParamId) -> Var {
        self.params[&id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Arc<Tensor<T>>, op: Op<T>) -> Var {
        self.nodes.push(TapeNode { value, op });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.push(Arc::new(value), op)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.record(value, Op::Constant)
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor<T>> {
        self.nodes[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- forward operations -------------------------------------------

    /// Matrix product. A rank-1 left operand is treated as a single row and
    /// yields a rank-1 result.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rank() != 2 || av.cols() != bv.rows() {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![T::zero(); m * n];
        gemm_acc(av.data(), bv.data(), &mut out, m, k, n);
        let t = Tensor::new(out_shape(av.rank(), m, n), out)?;
        Ok(self.record(t, Op::MatMul(a, b)))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.record(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.record(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.record(t, Op::Mul(a, b)))
    }

    /// `x + row` where `row` is a single row broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(Error::shape("add_row", xv.shape(), rv.shape()));
        }
        let c = xv.cols();
        let r = rv.data();
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + r[i % c]).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.record(t, Op::AddRow(x, row)))
    }

    /// Scales row `r` of `x` by `col[r]`; `col` is a one-column matrix.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (xv, cv) = (self.value(x), self.value(col));
        if cv.cols() != 1 || cv.rows() != xv.rows() {
            return Err(Error::shape("mul_col", xv.shape(), cv.shape()));
        }
        let c = xv.cols();
        let s = cv.data();
        let data = xv.data().iter().enumerate().map(|(i, &v)| v * s[i / c]).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.record(t, Op::MulCol(x, col)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.record(t, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.tanh_act());
        self.record(t, Op::Tanh(a))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.record(t, Op::Scale(a, s))
    }

    /// Concatenation along the last axis. All parts must share rank and row
    /// count; the first part occupies the leading columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat"))?;
        let (rank, rows) = (self.value(*first).rank(), self.value(*first).rows());
        for p in parts {
            let v = self.value(*p);
            if v.rank() != rank || v.rows() != rows {
                return Err(Error::shape("concat", self.value(*first).shape(), v.shape()));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let t = Tensor::new(out_shape(rank, rows, total), data)?;
        Ok(self.record(t, Op::Concat(parts.to_vec())))
    }

    /// Columns `[start, start + len)` of every row.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() || len == 0 {
            return Err(Error::OutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: xv.cols(),
            });
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let t = Tensor::new(out_shape(xv.rank(), rows, len), data)?;
        Ok(self.record(t, Op::SliceCols { x, start }))
    }

    /// Embedding lookup of one row, returned as a vector.
    pub fn gather_row(&mut self, table: Var, id: usize) -> Result<Var> {
        let tv = self.value(table);
        let t = self.gather_checked(tv, &[id])?;
        let d = t.cols();
        let t = t.reshape(vec![d])?;
        Ok(self.record(t, Op::Gather { table, ids: vec![id] }))
    }

    /// Embedding lookup of a batch of rows, returned as `[ids.len() × d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let t = self.gather_checked(tv, ids)?;
        Ok(self.record(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    fn gather_checked(&self, tv: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
        if tv.rank() != 2 {
            return Err(Error::InvalidArgument("gather: table must be rank 2".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * tv.cols());
        for &id in ids {
            if id >= tv.rows() {
                return Err(Error::OutOfRange {
                    op: "gather",
                    index: id,
                    bound: tv.rows(),
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        Tensor::matrix(ids.len(), tv.cols(), data)
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() == 0 {
            return Err(Error::Empty("softmax"));
        }
        let t = softmax_rows(xv, None);
        Ok(self.record(t, Op::Softmax(x)))
    }

    /// Row-wise softmax where masked-out entries receive exactly zero
    /// weight. `mask[r * cols + c]` selects live entries; every row needs at
    /// least one.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(Error::shape("masked_softmax", xv.shape(), &[mask.len()]));
        }
        let c = xv.cols();
        if c == 0 || mask.chunks(c).any(|row| !row.iter().any(|&m| m)) {
            return Err(Error::Empty("masked_softmax"));
        }
        let t = softmax_rows(xv, Some(mask));
        Ok(self.record(t, Op::Softmax(x)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if c == 0 {
            return Err(Error::Empty("log_softmax"));
        }
        let mut data = Vec::with_capacity(xv.len());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            data.extend(row.iter().map(|&v| v - lse));
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.record(t, Op::LogSoftmax(x)))
    }

    /// `-Σ_r weights[r] · x[r, targets[r]]` as a scalar.
    pub fn pick_nll(&mut self, x: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let xv = self.value(x);
        if targets.len() != xv.rows() || weights.len() != xv.rows() {
            return Err(Error::shape("pick_nll", xv.shape(), &[targets.len()]));
        }
        let mut acc = T::zero();
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if t >= xv.cols() {
                return Err(Error::OutOfRange {
                    op: "pick_nll",
                    index: t,
                    bound: xv.cols(),
                });
            }
            if w != T::zero() {
                acc = acc - w * xv.at(r, t);
            }
        }
        Ok(self.record(
            Tensor::scalar(acc),
            Op::PickNll {
                x,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.record(Tensor::scalar(s), Op::Sum(x))
    }

    /// `out[r] = Σ_i weights[r, i] · items[i][r]`. An item with a single row
    /// is shared by every output row.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Result<Var> {
        let wv = self.value(weights);
        if wv.cols() != items.len() || items.is_empty() {
            return Err(Error::shape("weighted_sum", wv.shape(), &[items.len()]));
        }
        let rows = wv.rows();
        let k = self.value(items[0]).cols();
        let rank = if wv.rank() == 1 { 1 } else { 2 };
        let mut data = vec![T::zero(); rows * k];
        for (i, item) in items.iter().enumerate() {
            let iv = self.value(*item);
            if iv.cols() != k || (iv.rows() != rows && iv.rows() != 1) {
                return Err(Error::shape("weighted_sum", self.value(items[0]).shape(), iv.shape()));
            }
            for r in 0..rows {
                let w = wv.at(r, i);
                let src = iv.row(if iv.rows() == 1 { 0 } else { r });
                for (o, &s) in data[r * k..(r + 1) * k].iter_mut().zip(src) {
                    *o = *o + w * s;
                }
            }
        }
        let t = Tensor::new(out_shape(rank, rows, k), data)?;
        Ok(self.record(
            t,
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
        ))
    }

    /// Row `r` comes from `a` where `mask[r]`, otherwise from `b`.
    pub fn select_rows(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() || mask.len() != av.rows() {
            return Err(Error::shape("select_rows", av.shape(), bv.shape()));
        }
        let c = av.cols();
        let mut data = Vec::with_capacity(av.len());
        for (r, &m) in mask.iter().enumerate() {
            data.extend_from_slice(if m { av.row(r) } else { bv.row(r) });
        }
        let t = Tensor::new(av.shape().to_vec(), data)?;
        debug_assert_eq!(t.cols(), c);
        Ok(self.record(
            t,
            Op::Select {
                mask: mask.to_vec(),
                a,
                b,
            },
        ))
    }

    // ---- reverse sweep ------------------------------------------------

    /// Propagates d(root)/d(node) to every node reachable from `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::filled(rv.shape(), T::one()));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let params = self
            .params
            .iter()
            .map(|(&id, &var)| {
                let g = grads
                    .get(var.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(self.value(var).shape()));
                (id, g)
            })
            .collect();
        Ok(Gradients { nodes: grads, params })
    }

    fn propagate(&self, node: &TapeNode<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let ga = acc_slot(grads, *a, av.shape());
                gemm_nt_acc(g.data(), bv.data(), ga.data_mut(), m, n, k);
                let gb = acc_slot(grads, *b, bv.shape());
                gemm_tn_acc(av.data(), g.data(), gb.data_mut(), m, k, n);
            }
            Op::Add(a, b) => {
                acc_slot(grads, *a, g.shape()).add_assign(g);
                acc_slot(grads, *b, g.shape()).add_assign(g);
            }
            Op::Sub(a, b) => {
                acc_slot(grads, *a, g.shape()).add_assign(g);
                let gb = acc_slot(grads, *b, g.shape());
                for (o, &v) in gb.data_mut().iter_mut().zip(g.data()) {
                    *o = *o - v;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = acc_slot(grads, *a, av.shape());
                for ((o, &gv), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                    *o = *o + gv * y;
                }
                let gb = acc_slot(grads, *b, bv.shape());
                for ((o, &gv), &x) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *o = *o + gv * x;
                }
            }
            Op::AddRow(x, row) => {
                acc_slot(grads, *x, g.shape()).add_assign(g);
                let rshape = self.value(*row).shape().to_vec();
                let gr = acc_slot(grads, *row, &rshape);
                let c = g.cols();
                for (i, &v) in g.data().iter().enumerate() {
                    let o = &mut gr.data_mut()[i % c];
                    *o = *o + v;
                }
            }
            Op::MulCol(x, col) => {
                let (xv, cv) = (self.value(*x), self.value(*col));
                let c = xv.cols();
                let gx = acc_slot(grads, *x, xv.shape());
                for (i, (o, &gv)) in gx.data_mut().iter_mut().zip(g.data()).enumerate() {
                    *o = *o + gv * cv.data()[i / c];
                }
                let gc = acc_slot(grads, *col, cv.shape());
                for r in 0..xv.rows() {
                    let dot: T = xv.row(r).iter().zip(g.row(r)).map(|(&a, &b)| a * b).sum();
                    gc.data_mut()[r] = gc.data_mut()[r] + dot;
                }
            }
            Op::Sigmoid(a) => {
                let ga = acc_slot(grads, *a, out.shape());
                for ((o, &gv), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *o = *o + gv * y * (T::one() - y);
                }
            }
            Op::Tanh(a) => {
                let ga = acc_slot(grads, *a, out.shape());
                for ((o, &gv), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *o = *o + gv * (T::one() - y * y);
                }
            }
            Op::Scale(a, s) => {
                let ga = acc_slot(grads, *a, out.shape());
                for (o, &gv) in ga.data_mut().iter_mut().zip(g.data()) {
                    *o = *o + gv * *s;
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let w = pv.cols();
                    let gp = acc_slot(grads, *p, pv.shape());
                    for r in 0..pv.rows() {
                        let src = &g.row(r)[offset..offset + w];
                        for (o, &v) in gp.data_mut()[r * w..(r + 1) * w].iter_mut().zip(src) {
                            *o = *o + v;
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let w = g.cols();
                let gx = acc_slot(grads, *x, xv.shape());
                for r in 0..g.rows() {
                    let dst = &mut gx.data_mut()[r * c + start..r * c + start + w];
                    for (o, &v) in dst.iter_mut().zip(g.row(r)) {
                        *o = *o + v;
                    }
                }
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let gt = acc_slot(grads, *table, tv.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt.data_mut()[id * d..(id + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                        *o = *o + v;
                    }
                }
            }
            Op::Softmax(x) => {
                let gx = acc_slot(grads, *x, out.shape());
                let c = out.cols();
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        let o = &mut gx.data_mut()[r * c + j];
                        *o = *o + y[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let gx = acc_slot(grads, *x, out.shape());
                let c = out.cols();
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let total: T = gr.iter().copied().sum();
                    for j in 0..c {
                        let o = &mut gx.data_mut()[r * c + j];
                        *o = *o + gr[j] - y[j].exp() * total;
                    }
                }
            }
            Op::PickNll { x, targets, weights } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let gx = acc_slot(grads, *x, xv.shape());
                let gv = g.item();
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let o = &mut gx.data_mut()[r * c + t];
                    *o = *o - w * gv;
                }
            }
            Op::Sum(x) => {
                let gv = g.item();
                let gx = acc_slot(grads, *x, self.value(*x).shape());
                for o in gx.data_mut() {
                    *o = *o + gv;
                }
            }
            Op::WeightedSum { weights, items } => {
                let wv = self.value(*weights);
                let rows = wv.rows();
                let k = g.cols();
                let mut gw = vec![T::zero(); wv.len()];
                for (i, item) in items.iter().enumerate() {
                    let iv = self.value(*item);
                    let shared = iv.rows() == 1;
                    let gi = acc_slot(grads, *item, iv.shape());
                    for r in 0..rows {
                        let ir = if shared { 0 } else { r };
                        let grow = g.row(r);
                        let w = wv.at(r, i);
                        let src = iv.row(ir);
                        gw[r * items.len() + i] = grow.iter().zip(src).map(|(&a, &b)| a * b).sum::<T>();
                        for (o, &v) in gi.data_mut()[ir * k..(ir + 1) * k].iter_mut().zip(grow) {
                            *o = *o + w * v;
                        }
                    }
                }
                let gwt = acc_slot(grads, *weights, wv.shape());
                for (o, v) in gwt.data_mut().iter_mut().zip(gw) {
                    *o = *o + v;
                }
            }
            Op::Select { mask, a, b } => {
                let c = g.cols();
                {
                    let ga = acc_slot(grads, *a, g.shape());
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            for (o, &v) in ga.data_mut()[r * c..(r + 1) * c].iter_mut().zip(g.row(r)) {
                                *o = *o + v;
                            }
                        }
                    }
                }
                let gb = acc_slot(grads, *b, g.shape());
                for (r, &m) in mask.iter().enumerate() {
                    if !m {
                        for (o, &v) in gb.data_mut()[r * c..(r + 1) * c].iter_mut().zip(g.row(r)) {
                            *o = *o + v;
                        }
                    }
                }
            }
        }
    }
}

fn softmax_rows<T: Real>(xv: &Tensor<T>, mask: Option<&[bool]>) -> Tensor<T> {
    let c = xv.cols();
    let mut data = Vec::with_capacity(xv.len());
    for r in 0..xv.rows() {
        let row = xv.row(r);
        let live = |j: usize| mask.is_none_or(|m| m[r * c + j]);
        let max = (0..c)
            .filter(|&j| live(j))
            .map(|j| row[j])
            .fold(T::neg_infinity(), T::max);
        let start = data.len();
        let mut total = T::zero();
        for (j, &v) in row.iter().enumerate() {
            let e = if live(j) { (v - max).exp() } else { T::zero() };
            total = total + e;
            data.push(e);
        }
        for e in &mut data[start..] {
            *e = *e / total;
        }
    }
    Tensor::new(xv.shape().to_vec(), data).expect("softmax preserves shape")
}

fn acc_slot<'a, T: Real>(grads: &'a mut [Option<Tensor<T>>], v: Var, shape: &[usize]) -> &'a mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a parameter block; zero when unreachable.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    /// Gradient with respect to any node, `None` when unreachable.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(&id, t)| (id, t))
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor<T>> {
        self.params
    }
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// `(block name, element, analytic, numeric, relative error)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64, f64)>,
}

/// Relative error with a floor on the denominator so that coordinates whose
/// true gradient is ~0 are judged by absolute error. In 64-bit arithmetic a
/// central difference at step 1e-5 resolves gradients only to about 1e-9, so
/// the floor sits at 1e-5 to keep a 1e-4 tolerance above that noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-5;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares reverse-mode gradients of `loss` against central differences
/// `(f(θ+εe) − f(θ−εe)) / 2ε` at the given `(block, element)` coordinates.
///
/// `loss` builds a scalar on a graph already bound to the store it is
/// given, and must be deterministic.
pub fn finite_difference_check<F>(
    params: &ParamStore<f64>,
    loss: F,
    step: f64,
    coords: &[(ParamId, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::with_params(store);
        let root = loss(&mut g)?;
        let v = g.value(root).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluated to {v}")));
        }
        Ok(v)
    };

    let mut g = Graph::with_params(params);
    let root = loss(&mut g)?;
    if !g.value(root).item().is_finite() {
        return Err(Error::NonFinite("loss at the base point".into()));
    }
    let grads = g.backward(root)?;

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: 0,
        worst: None,
    };
    for &(id, idx) in coords {
        let analytic = grads.param(id).map_or(0.0, |t| t.data()[idx]);
        let orig = params.get(id).data()[idx];
        work.get_mut(id).data_mut()[idx] = orig + step;
        let plus = eval(&work)?;
        work.get_mut(id).data_mut()[idx] = orig - step;
        let minus = eval(&work)?;
        work.get_mut(id).data_mut()[idx] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic, numeric);
        report.coordinates += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((params.block(id).name.clone(), idx, analytic, numeric, err));
        }
    }
    Ok(report)
}

/// Spreads `total` coordinates over every block of `store` (at least one per
/// block), choosing elements with `rng`.
pub fn sample_coordinates<R: rand::Rng>(store: &ParamStore<f64>, total: usize, rng: &mut R) -> Vec<(ParamId, usize)> {
    let blocks = store.len().max(1);
    let per_block = total.div_ceil(blocks).max(1);
    let mut coords = Vec::new();
    for id in store.ids() {
        let n = store.get(id).len();
        for _ in 0..per_block.min(n.max(1)) {
            coords.push((id, rng.gen_range(0..n)));
        }
    }
    coords
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vecf(v: &[f64]) -> Tensor<f64> {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::uniform(&[3, 3], 1.0, &mut rng);
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(3));
        let av = g.constant(a.clone());
        let out = g.matmul(i, av).unwrap();
        assert_eq!(g.value(out), &a);
    }

    #[test]
    fn small_matmul_by_hand() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f64>::uniform(&[4, 5], 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[5, 3], 1.0, &mut rng);
        let mut expected = [[0.0f64; 3]; 4];
        for (i, row) in expected.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                for k in 0..5 {
                    *cell += a.at(i, k) * b.at(k, j);
                }
            }
        }
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a), g.constant(b));
        let c = g.matmul(av, bv).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                assert!((g.value(c).at(i, j) - expected[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatched_inner_extent() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(vecf(&[0.0, 0.0]));
        let s = g.softmax(a).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let b = g.constant(vecf(&[1.0, 1.0, 1.0]));
        let s = g.softmax(b).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        // exp/normalize oracle
        let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let expected = [1f64.exp() / denom, 2f64.exp() / denom, 3f64.exp() / denom];
        let c = g.constant(vecf(&[1.0, 2.0, 3.0]));
        let s = g.softmax(c).unwrap();
        for (v, e) in g.value(s).data().iter().zip(expected) {
            assert!((v - e).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_empty() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::vector(vec![]));
        assert!(matches!(g.softmax(a), Err(Error::Empty(_))));
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(vecf(&[5.0, 1.0, 1.0]));
        let s = g.masked_softmax(a, &[false, true, true]).unwrap();
        assert_eq!(g.value(s).data(), &[0.0, 0.5, 0.5]);
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(a).unwrap().data().iter().all(|&x| x.abs() < 1e-15));
    }

    #[test]
    fn elementwise_cases() {
        let mut g = Graph::<f32>::new();
        let z = g.constant(Tensor::vector(vec![0.0]));
        let s = g.sigmoid(z);
        let t = g.tanh(z);
        assert_eq!(g.value(s).item(), 0.5);
        assert_eq!(g.value(t).item(), 0.0);
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
        let d = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(g.add(a, d), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(g.mul(a, d), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn concat_cases() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(vecf(&[1.0]));
        let b = g.constant(vecf(&[2.0]));
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0]);

        let x = g.constant(vecf(&[3.0, 4.0]));
        let e = g.constant(vecf(&[]));
        let xe = g.concat(&[x, e]).unwrap();
        assert_eq!(g.value(xe).data(), &[3.0, 4.0]);

        let loss = g.sum(c);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(a).unwrap().data(), &[1.0]);
        assert_eq!(grads.wrt(b).unwrap().data(), &[1.0]);
    }

    #[test]
    fn concat_rejects_rank_mix() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(vecf(&[1.0]));
        let b = g.constant(Tensor::zeros(&[1, 2]));
        assert!(g.concat(&[a, b]).is_err());
    }

    #[test]
    fn gather_row_cases() {
        let mut store = ParamStore::<f64>::new();
        let table = store.add("table", Tensor::identity(4));
        let mut g = Graph::with_params(&store);
        let t = g.p(table);
        let r = g.gather_row(t, 2).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 1.0, 0.0]);
        assert!(matches!(g.gather_row(t, 4), Err(Error::OutOfRange { .. })));

        let r2 = g.gather_row(t, 2).unwrap();
        let both = g.add(r, r2).unwrap();
        let loss = g.sum(both);
        let grads = g.backward(loss).unwrap();
        let gt = grads.param(table).unwrap();
        assert_eq!(gt.row(2), &[2.0, 2.0, 2.0, 2.0]);
        assert_eq!(gt.row(0), &[0.0; 4]);
    }

    #[test]
    fn backward_square_and_softmax_sum() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(vecf(&[3.0]));
        let sq = g.mul(x, x).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 6.0);

        let mut g = Graph::<f64>::new();
        let v = g.constant(vecf(&[0.3, -1.2, 2.0]));
        let s = g.softmax(v).unwrap();
        let total = g.sum(s);
        let grads = g.backward(total).unwrap();
        assert!(grads.wrt(v).unwrap().data().iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(vecf(&[1.0, 2.0]));
        assert!(matches!(g.backward(v), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn untouched_parameter_gets_exact_zero() {
        let mut store = ParamStore::<f64>::new();
        let used = store.add("used", vecf(&[1.5, -2.0]));
        let unused = store.add("unused", vecf(&[4.0, 5.0]));
        let mut g = Graph::with_params(&store);
        let u = g.p(used);
        let t = g.tanh(u);
        let loss = g.sum(t);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn tanh_gradient_check() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", vecf(&[0.3]));
        let report = finite_difference_check(
            &store,
            |g| {
                let v = g.p(x);
                let t = g.tanh(v);
                Ok(g.sum(t))
            },
            1e-5,
            &[(x, 0)],
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn linear_gradient_check_is_exact_up_to_rounding() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", vecf(&[0.5, -1.0, 2.0]));
        let c = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let report = finite_difference_check(
            &store,
            |g| {
                let wv = g.p(w);
                let cv = g.constant(c.clone());
                let prod = g.mul(wv, cv)?;
                Ok(g.sum(prod))
            },
            1e-5,
            &[(w, 0), (w, 1), (w, 2)],
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", vecf(&[1.0]));
        let out = finite_difference_check(
            &store,
            |g| {
                let wv = g.p(w);
                Ok(g.scale(wv, f64::INFINITY))
            },
            1e-5,
            &[(w, 0)],
        );
        assert!(matches!(out, Err(Error::NonFinite(_))));
    }

    /// Every op, checked against central differences on random inputs.
    #[test]
    fn every_op_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let a = store.add_uniform("a", &[3, 4], &mut rng);
        let b = store.add_uniform("b", &[4, 5], &mut rng);
        let row = store.add_uniform("row", &[5], &mut rng);
        let col = store.add_uniform("col", &[3, 1], &mut rng);
        let table = store.add_uniform("table", &[6, 5], &mut rng);
        let other = store.add_uniform("other", &[3, 5], &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get(id).map(|x| x * 10.0);
            store.set(id, t).unwrap();
        }
        let loss = |g: &mut Graph<f64>| -> Result<Var> {
            let m = g.matmul(g.p(a), g.p(b))?; // 3×5
            let m = g.add_row(m, g.p(row))?;
            let m = g.mul_col(m, g.p(col))?;
            let s = g.sigmoid(m);
            let e = g.gather_rows(g.p(table), &[1, 4, 1])?;
            let t = g.tanh(e);
            let x = g.mul(s, t)?;
            let x = g.sub(x, g.p(other))?;
            let x = g.scale(x, 0.7);
            let left = g.slice_cols(x, 0, 2)?;
            let right = g.slice_cols(x, 2, 3)?;
            let cat = g.concat(&[right, left])?;
            let w = g.masked_softmax(
                cat,
                &[
                    true, true, false, true, true, //
                    true, true, true, true, true, //
                    false, true, true, true, true,
                ],
            )?;
            let items: Vec<Var> = vec![g.p(other), g.gather_rows(g.p(table), &[5])?, x, cat, g.tanh(cat)];
            let ws = g.weighted_sum(w, &items)?; // 3×5
            let sel = g.select_rows(&[true, false, true], ws, x)?;
            let sm = g.softmax(sel)?;
            let ls = g.log_softmax(sel)?;
            let pick = g.pick_nll(ls, &[0, 3, 4], &[0.5, 0.25, 1.0])?;
            let tot = g.sum(sm);
            let sq = g.mul(sm, sm)?;
            let tot2 = g.sum(sq);
            let both = g.add(pick, tot)?;
            g.add(both, tot2)
        };
        let coords: Vec<_> = store
            .ids()
            .flat_map(|id| (0..store.get(id).len()).map(move |i| (id, i)))
            .collect();
        let report = finite_difference_check(&store, loss, 1e-5, &coords).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
