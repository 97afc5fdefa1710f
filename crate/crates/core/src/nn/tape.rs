//! Reverse-mode gradient tape over matrix-valued nodes.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. Nodes are created in topological order, so
//! `backward` walks them once, last to first.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use super::matrix::{matmul_into, Matrix};
use super::ParamStore;
use crate::sparsegrid::Rulebook;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;
pub const LOG_CLAMP: f64 = 1e-12;

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    LeakyRelu(usize, f64),
    /// Per-column normalization; `batch` selects batch statistics (train) vs
    /// fixed statistics (eval).
    ColumnNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Matrix,
        inv_std: Vec<f64>,
        batch: bool,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(usize),
    Transpose(usize),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows(usize, Rc<Vec<usize>>),
    SparseConv {
        x: usize,
        w: usize,
        rb: Rc<Rulebook>,
    },
    SegmentMean {
        x: usize,
        seg: Rc<Vec<usize>>,
        counts: Vec<usize>,
    },
    /// Scalar loss whose gradient w.r.t. `x` was computed in the forward pass.
    ScalarWithGrad { x: usize, grad: Matrix },
    Sum(usize),
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, usize>,
    param_order: Vec<(String, usize)>,
    buffer_updates: Vec<(String, Matrix)>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    pub params: BTreeMap<String, Matrix>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    /// Constant or input leaf.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a named trainable parameter; repeated calls share a node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&i) = self.params.get(name) {
            return Var(i);
        }
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
            .clone();
        let v = self.push(value, Op::Leaf);
        self.params.insert(name.to_string(), v.0);
        self.param_order.push((name.to_string(), v.0));
        v
    }

    /// Running-statistic updates recorded by train-mode batch norms.
    pub fn take_buffer_updates(&mut self) -> Vec<(String, Matrix)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols != y.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                x.rows, x.cols, y.rows, y.cols
            )));
        }
        let v = x.matmul(y);
        Ok(self.push(v, Op::MatMul(a.0, b.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!("add {:?} and {:?}", x.shape(), y.shape())));
        }
        let mut v = x.clone();
        v.add_assign(y);
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    /// Adds a `1 x C` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, r) = (self.value(x), self.value(row));
        if r.rows != 1 || r.cols != xv.cols {
            return Err(Error::Shape(format!(
                "row broadcast of {:?} onto {:?}",
                r.shape(),
                xv.shape()
            )));
        }
        let mut v = xv.clone();
        for i in 0..v.rows {
            for (a, b) in v.row_mut(i).iter_mut().zip(&r.data) {
                *a += b;
            }
        }
        Ok(self.push(v, Op::AddRow(x.0, row.0)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scale(s);
        self.push(v, Op::Scale(x.0, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for a in &mut v.data {
            *a = a.max(0.0);
        }
        self.push(v, Op::Relu(x.0))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let mut v = self.value(x).clone();
        for a in &mut v.data {
            if *a < 0.0 {
                *a *= slope;
            }
        }
        self.push(v, Op::LeakyRelu(x.0, slope))
    }

    /// Batch normalization with batch statistics. Returns the output and the
    /// per-channel `(mean, unbiased variance)` used for running statistics.
    pub fn batch_norm_train(&mut self, x: Var, gain: Var, bias: Var) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        if n == 0 {
            return Err(Error::Shape("batch norm on zero rows".into()));
        }
        self.check_channel_param(gain, c)?;
        self.check_channel_param(bias, c)?;
        let mut mean = vec![0.0; c];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; c];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let unbiased: Vec<f64> = var
            .iter()
            .map(|s| if n > 1 { s / (n - 1) as f64 } else { 0.0 })
            .collect();
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / n as f64 + BN_EPS).sqrt()).collect();
        let out = self.column_norm(x, gain, bias, &mean, inv_std, true);
        Ok((out, mean, unbiased))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        let c = self.value(x).cols;
        self.check_channel_param(gain, c)?;
        self.check_channel_param(bias, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Shape("running statistics length".into()));
        }
        let inv_std = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        Ok(self.column_norm(x, gain, bias, running_mean, inv_std, false))
    }

    fn check_channel_param(&self, p: Var, c: usize) -> Result<()> {
        let v = self.value(p);
        if v.rows != 1 || v.cols != c {
            return Err(Error::Shape(format!(
                "channel parameter {:?} for {c} channels",
                v.shape()
            )));
        }
        Ok(())
    }

    fn column_norm(&mut self, x: Var, gain: Var, bias: Var, mean: &[f64], inv_std: Vec<f64>, batch: bool) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut xhat = Matrix::zeros(n, c);
        let mut out = Matrix::zeros(n, c);
        for r in 0..n {
            for j in 0..c {
                let h = (xv.get(r, j) - mean[j]) * inv_std[j];
                xhat.set(r, j, h);
                out.set(r, j, h * g[j] + b[j]);
            }
        }
        self.push(
            out,
            Op::ColumnNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
                batch,
            },
        )
    }

    /// Per-row normalization over columns with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        self.check_channel_param(gain, c)?;
        self.check_channel_param(bias, c)?;
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut xhat = Matrix::zeros(n, c);
        let mut out = Matrix::zeros(n, c);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let m = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - m) * is;
                xhat.set(r, j, h);
                out.set(r, j, h * g[j] + b[j]);
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for r in 0..v.rows {
            softmax_in_place(v.row_mut(r));
        }
        self.push(v, Op::SoftmaxRows(x.0))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        self.push(v, Op::Transpose(x.0))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols, "column slice out of range");
        let mut v = Matrix::zeros(xv.rows, len);
        for r in 0..xv.rows {
            v.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(v, Op::SliceCols(x.0, start))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.rows, "row slice out of range");
        let v = Matrix {
            rows: len,
            cols: xv.cols,
            data: xv.data[start * xv.cols..(start + len) * xv.cols].to_vec(),
        };
        self.push(v, Op::SliceRows(x.0, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows;
        if parts.iter().any(|p| self.value(*p).rows != rows) {
            return Err(Error::Shape("concat_cols row mismatch".into()));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut v = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let pv = self.value(*p);
                v.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
                off += pv.cols;
            }
        }
        Ok(self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols;
        if parts.iter().any(|p| self.value(*p).cols != cols) {
            return Err(Error::Shape("concat_rows column mismatch".into()));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        Ok(self.push(Matrix { rows, cols, data }, Op::ConcatRows(parts.iter().map(|p| p.0).collect())))
    }

    /// Output row `r` is input row `index[r]`.
    pub fn gather_rows(&mut self, x: Var, index: Rc<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let mut v = Matrix::zeros(index.len(), xv.cols);
        for (r, &i) in index.iter().enumerate() {
            v.row_mut(r).copy_from_slice(xv.row(i));
        }
        self.push(v, Op::GatherRows(x.0, index))
    }

    /// Sparse convolution: output row `o` sums `x[i] * W[k]` over the
    /// rulebook pairs `(i, o)` of every kernel offset `k`. `w` is
    /// `(K * C_in) x C_out`, offset-major.
    pub fn sparse_conv(&mut self, x: Var, w: Var, rb: Rc<Rulebook>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let kv = rb.offsets.len();
        let cin = xv.cols;
        if xv.rows != rb.in_count {
            return Err(Error::Shape(format!(
                "conv input has {} rows, rulebook expects {}",
                xv.rows, rb.in_count
            )));
        }
        if wv.rows != kv * cin {
            return Err(Error::Shape(format!(
                "conv weight has {} rows, expected {} ({} offsets x {} channels)",
                wv.rows,
                kv * cin,
                kv,
                cin
            )));
        }
        let cout = wv.cols;
        let mut out = Matrix::zeros(rb.out_count(), cout);
        for (k, pairs) in rb.pairs.iter().enumerate() {
            let wk = &wv.data[k * cin * cout..(k + 1) * cin * cout];
            for &(i, o) in pairs {
                let xi = xv.row(i as usize);
                let orow = &mut out.data[o as usize * cout..(o as usize + 1) * cout];
                matmul_into(xi, wk, orow, 1, cin, cout);
            }
        }
        Ok(self.push(out, Op::SparseConv { x: x.0, w: w.0, rb }))
    }

    /// Mean of the rows of `x` grouped by `seg` (values in `0..n_segments`).
    /// Empty segments yield zero rows.
    pub fn segment_mean(&mut self, x: Var, seg: Rc<Vec<usize>>, n_segments: usize) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(n_segments, xv.cols);
        let mut counts = vec![0usize; n_segments];
        for (r, &s) in seg.iter().enumerate() {
            counts[s] += 1;
            for (o, v) in out.row_mut(s).iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        for (s, &c) in counts.iter().enumerate() {
            if c > 0 {
                for o in out.row_mut(s) {
                    *o /= c as f64;
                }
            }
        }
        self.push(out, Op::SegmentMean { x: x.0, seg, counts })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data.iter().sum();
        self.push(Matrix::filled(1, 1, s), Op::Sum(x.0))
    }

    /// Records a scalar whose gradient w.r.t. `x` is already known.
    pub(crate) fn scalar_with_grad(&mut self, x: Var, value: f64, grad: Matrix) -> Var {
        debug_assert_eq!(grad.shape(), self.value(x).shape());
        self.push(Matrix::filled(1, 1, value), Op::ScalarWithGrad { x: x.0, grad })
    }

    pub(crate) fn record_buffer(&mut self, name: String, value: Matrix) {
        self.buffer_updates.push((name, value));
    }

    /// Back-propagates from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .param_order
            .iter()
            .map(|(name, i)| {
                let g = grads[*i]
                    .clone()
                    .unwrap_or_else(|| Matrix::zeros(self.nodes[*i].value.rows, self.nodes[*i].value.cols));
                (name.clone(), g)
            })
            .collect();
        Gradients { grads, params }
    }

    fn backprop_node(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.matmul_t(val(*b)));
                accumulate(grads, *b, val(*a).t_matmul(g));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(x, row) => {
                accumulate(grads, *x, g.clone());
                accumulate(grads, *row, column_sums(g));
            }
            Op::Scale(x, s) => accumulate(grads, *x, g.scale(*s)),
            Op::Relu(x) => {
                let xv = val(*x);
                let mut d = g.clone();
                for (dv, &xv) in d.data.iter_mut().zip(&xv.data) {
                    if xv <= 0.0 {
                        *dv = 0.0;
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::LeakyRelu(x, slope) => {
                let xv = val(*x);
                let mut d = g.clone();
                for (dv, &xv) in d.data.iter_mut().zip(&xv.data) {
                    if xv < 0.0 {
                        *dv *= slope;
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::ColumnNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                batch,
            } => {
                let (n, c) = xhat.shape();
                let gv = &val(*gain).data;
                let mut dgain = Matrix::zeros(1, c);
                let mut dbias = Matrix::zeros(1, c);
                for r in 0..n {
                    for j in 0..c {
                        dgain.data[j] += g.get(r, j) * xhat.get(r, j);
                        dbias.data[j] += g.get(r, j);
                    }
                }
                let mut dx = Matrix::zeros(n, c);
                if *batch {
                    let nf = n as f64;
                    for j in 0..c {
                        let s1 = dbias.data[j] * gv[j];
                        let s2 = dgain.data[j] * gv[j];
                        for r in 0..n {
                            let dxhat = g.get(r, j) * gv[j];
                            dx.set(r, j, inv_std[j] / nf * (nf * dxhat - s1 - xhat.get(r, j) * s2));
                        }
                    }
                } else {
                    for r in 0..n {
                        for j in 0..c {
                            dx.set(r, j, g.get(r, j) * gv[j] * inv_std[j]);
                        }
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gain, dgain);
                accumulate(grads, *bias, dbias);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (n, c) = xhat.shape();
                let gv = &val(*gain).data;
                let mut dgain = Matrix::zeros(1, c);
                let mut dbias = Matrix::zeros(1, c);
                let mut dx = Matrix::zeros(n, c);
                let cf = c as f64;
                for r in 0..n {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..c {
                        let gr = g.get(r, j);
                        dgain.data[j] += gr * xhat.get(r, j);
                        dbias.data[j] += gr;
                        let dxhat = gr * gv[j];
                        s1 += dxhat;
                        s2 += dxhat * xhat.get(r, j);
                    }
                    for j in 0..c {
                        let dxhat = g.get(r, j) * gv[j];
                        dx.set(r, j, inv_std[r] / cf * (cf * dxhat - s1 - xhat.get(r, j) * s2));
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gain, dgain);
                accumulate(grads, *bias, dbias);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, dv) in d.row_mut(r).iter_mut().enumerate() {
                        *dv = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::Transpose(x) => accumulate(grads, *x, g.transpose()),
            Op::SliceCols(x, start) => {
                let xv = val(*x);
                let mut d = Matrix::zeros(xv.rows, xv.cols);
                for r in 0..g.rows {
                    d.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, d);
            }
            Op::SliceRows(x, start) => {
                let xv = val(*x);
                let mut d = Matrix::zeros(xv.rows, xv.cols);
                d.data[start * xv.cols..(start + g.rows) * xv.cols].copy_from_slice(&g.data);
                accumulate(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = val(p).cols;
                    let mut d = Matrix::zeros(g.rows, pc);
                    for r in 0..g.rows {
                        d.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                    }
                    off += pc;
                    accumulate(grads, p, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = val(p);
                    let d = Matrix {
                        rows: pv.rows,
                        cols: pv.cols,
                        data: g.data[off..off + pv.data.len()].to_vec(),
                    };
                    off += pv.data.len();
                    accumulate(grads, p, d);
                }
            }
            Op::GatherRows(x, index) => {
                let xv = val(*x);
                let mut d = Matrix::zeros(xv.rows, xv.cols);
                for (r, &i) in index.iter().enumerate() {
                    for (a, b) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *a += b;
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::SparseConv { x, w, rb } => {
                let xv = val(*x);
                let wv = val(*w);
                let cin = xv.cols;
                let cout = wv.cols;
                let mut dx = Matrix::zeros(xv.rows, cin);
                let mut dw = Matrix::zeros(wv.rows, cout);
                for (k, pairs) in rb.pairs.iter().enumerate() {
                    let wk = &wv.data[k * cin * cout..(k + 1) * cin * cout];
                    let dwk = &mut dw.data[k * cin * cout..(k + 1) * cin * cout];
                    for &(i, o) in pairs {
                        let go = g.row(o as usize);
                        let xi = xv.row(i as usize);
                        let dxi = &mut dx.data[i as usize * cin..(i as usize + 1) * cin];
                        for c in 0..cin {
                            let wrow = &wk[c * cout..(c + 1) * cout];
                            dxi[c] += wrow.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                            let xc = xi[c];
                            if xc != 0.0 {
                                for (dwv, gv) in dwk[c * cout..(c + 1) * cout].iter_mut().zip(go) {
                                    *dwv += xc * gv;
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
            }
            Op::SegmentMean { x, seg, counts } => {
                let xv = val(*x);
                let mut d = Matrix::zeros(xv.rows, xv.cols);
                for (r, &s) in seg.iter().enumerate() {
                    let inv = 1.0 / counts[s] as f64;
                    for (a, b) in d.row_mut(r).iter_mut().zip(g.row(s)) {
                        *a = b * inv;
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::ScalarWithGrad { x, grad } => {
                accumulate(grads, *x, grad.scale(g.data[0]));
            }
            Op::Sum(x) => {
                let xv = val(*x);
                accumulate(grads, *x, Matrix::filled(xv.rows, xv.cols, g.data[0]));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], i: usize, g: Matrix) {
    match &mut grads[i] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut s = Matrix::zeros(1, m.cols);
    for r in 0..m.rows {
        for (a, b) in s.data.iter_mut().zip(m.row(r)) {
            *a += b;
        }
    }
    s
}

/// Numerically stable softmax (max subtracted before exponentiation).
pub fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut v = logits.to_vec();
    softmax_in_place(&mut v);
    v
}
