//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values are computed
//! eagerly; [`Tape::backward`] walks the record in reverse and returns the
//! gradient of a scalar output with respect to every parameter that took part.
//! Parameters are borrowed from a [`ParamStore`] and never copied onto the tape.

use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Lookup description for the pairwise attention bias of one head.
#[derive(Clone, Debug)]
pub struct BiasLookup {
    pub n: usize,
    pub distance_buckets: Vec<u16>,
    pub distinction_buckets: Vec<u16>,
    pub head: usize,
    pub distance_g2g: u16,
    pub distinction_g2g: u16,
}

enum Val<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Scale(Var, T),
    MulConst(Var, Tensor<T>),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, inv_std: Vec<T> },
    SoftmaxRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    StackRows(Vec<(Var, usize)>),
    RepeatRow(Var),
    Pna { x: Var, groups: Vec<Vec<usize>>, arg_max: Vec<usize>, arg_min: Vec<usize> },
    PairBias { f1: Var, f2: Var, g2g: Var, lookup: BiasLookup },
    CrossEntropyRows { logits: Var, labels: Vec<usize>, probs: Tensor<T> },
    MeanRows(Var, Vec<usize>),
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    val: Val<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<Var>>,
}

const LN_EPS: f64 = 1e-5;

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new(), param_nodes: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].val {
            Val::Owned(t) => t,
            Val::Param(id) => self.params.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> T {
        let t = self.value(v);
        debug_assert_eq!(t.shape(), (1, 1));
        t.get(0, 0)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { val: Val::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.index()] {
            return v;
        }
        self.nodes.push(Node { val: Val::Param(id), op: Op::Param(id), requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(k, k2, "matmul shape mismatch {n}x{k} * {k2}x{m}");
        let mut out = Tensor::zeros(n, m);
        matmul_into(self.value(a).as_slice(), self.value(b).as_slice(), out.as_mut_slice(), n, k, m);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (m, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_nt shape mismatch");
        let mut out = Tensor::zeros(n, m);
        matmul_nt_into(self.value(a).as_slice(), self.value(b).as_slice(), out.as_mut_slice(), n, k, m);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulNt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Adds a `1 x m` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (n, m) = self.shape(x);
        assert_eq!(self.shape(row), (1, m), "add_row shape mismatch");
        let mut out = self.value(x).clone();
        let r = self.value(row).as_slice().to_vec();
        for i in 0..n {
            for (o, &b) in out.row_slice_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        self.push(out, Op::AddRow(x, row), rg)
    }

    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Var {
        assert_eq!(self.shape(x), c.shape(), "add_const shape mismatch");
        let mut out = self.value(x).clone();
        out.add_assign(c);
        let rg = self.rg(x);
        self.push(out, Op::AddConst(x), rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mul_const(&mut self, x: Var, mask: Tensor<T>) -> Var {
        assert_eq!(self.shape(x), mask.shape());
        let mut out = self.value(x).clone();
        for (o, &m) in out.as_mut_slice().iter_mut().zip(mask.as_slice()) {
            *o *= m;
        }
        let rg = self.rg(x);
        self.push(out, Op::MulConst(x, mask), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Row-wise layer normalisation with gain `gamma` and shift `beta` (both `1 x m`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (n, m) = self.shape(x);
        let eps = T::c(LN_EPS);
        let mf = T::count(m);
        let xv = self.value(x);
        let g = self.value(gamma).as_slice();
        let b = self.value(beta).as_slice();
        let mut xhat = Tensor::zeros(n, m);
        let mut out = Tensor::zeros(n, m);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row_slice(i);
            let mean = row.iter().copied().sum::<T>() / mf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..m {
                let h = (row[j] - mean) * is;
                xhat.set(i, j, h);
                out.set(i, j, h * g[j] + b[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg)
    }

    /// Numerically stable row softmax (row maximum subtracted first).
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, m) = self.shape(x);
        assert!(start + len <= m, "slice_cols out of range");
        let xv = self.value(x);
        let out = Tensor::from_fn(n, len, |i, j| xv.get(i, start + j));
        let rg = self.rg(x);
        self.push(out, Op::SliceCols(x, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(n, total);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), n, "concat_cols row mismatch");
            for i in 0..n {
                out.row_slice_mut(i)[off..off + pv.cols()].copy_from_slice(pv.row_slice(i));
            }
            off += pv.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let xv = self.value(x);
        let m = xv.cols();
        let mut out = Tensor::zeros(rows.len(), m);
        for (i, &r) in rows.iter().enumerate() {
            out.row_slice_mut(i).copy_from_slice(xv.row_slice(r));
        }
        let rg = self.rg(x);
        self.push(out, Op::GatherRows(x, rows.to_vec()), rg)
    }

    /// Stacks single rows taken from several sources.
    pub fn stack_rows(&mut self, sources: &[(Var, usize)]) -> Var {
        let m = self.shape(sources[0].0).1;
        let mut out = Tensor::zeros(sources.len(), m);
        for (i, &(v, r)) in sources.iter().enumerate() {
            let vv = self.value(v);
            assert_eq!(vv.cols(), m, "stack_rows width mismatch");
            out.row_slice_mut(i).copy_from_slice(vv.row_slice(r));
        }
        let rg = sources.iter().any(|&(v, _)| self.rg(v));
        self.push(out, Op::StackRows(sources.to_vec()), rg)
    }

    /// Repeats a `1 x m` row `n` times.
    pub fn repeat_row(&mut self, row: Var, n: usize) -> Var {
        let rv = self.value(row);
        assert_eq!(rv.rows(), 1);
        let out = Tensor::from_fn(n, rv.cols(), |_, j| rv.get(0, j));
        let rg = self.rg(row);
        self.push(out, Op::RepeatRow(row), rg)
    }

    /// Mean, max, min and population standard deviation of each row group,
    /// concatenated to a `groups x 4m` matrix.
    pub fn pna(&mut self, x: Var, groups: &[Vec<usize>]) -> Var {
        let xv = self.value(x);
        let m = xv.cols();
        let mut out = Tensor::zeros(groups.len(), 4 * m);
        let mut arg_max = Vec::with_capacity(groups.len() * m);
        let mut arg_min = Vec::with_capacity(groups.len() * m);
        for (g, rows) in groups.iter().enumerate() {
            assert!(!rows.is_empty(), "pooling over an empty sequence");
            let nf = T::count(rows.len());
            for j in 0..m {
                let mut sum = T::zero();
                let (mut mx, mut mn) = (rows[0], rows[0]);
                for &r in rows {
                    let v = xv.get(r, j);
                    sum += v;
                    if v > xv.get(mx, j) {
                        mx = r;
                    }
                    if v < xv.get(mn, j) {
                        mn = r;
                    }
                }
                let mean = sum / nf;
                let var = rows.iter().map(|&r| (xv.get(r, j) - mean).powi(2)).sum::<T>() / nf;
                out.set(g, j, mean);
                out.set(g, m + j, xv.get(mx, j));
                out.set(g, 2 * m + j, xv.get(mn, j));
                out.set(g, 3 * m + j, var.max(T::zero()).sqrt());
                arg_max.push(mx);
                arg_min.push(mn);
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Pna { x, groups: groups.to_vec(), arg_max, arg_min }, rg)
    }

    /// `n x n` attention bias `0.5 * (f1[P] + f2[D])` for one head; G2G buckets
    /// read the shared `g2g` row instead of either table.
    pub fn pair_bias(&mut self, f1: Var, f2: Var, g2g: Var, lookup: BiasLookup) -> Var {
        let n = lookup.n;
        let half = T::c(0.5);
        let (f1v, f2v, gv) = (self.value(f1), self.value(f2), self.value(g2g));
        let h = lookup.head;
        let mut out = Tensor::zeros(n, n);
        for idx in 0..n * n {
            let p = lookup.distance_buckets[idx];
            let d = lookup.distinction_buckets[idx];
            let a = if p == lookup.distance_g2g { gv.get(0, h) } else { f1v.get(p as usize, h) };
            let b = if d == lookup.distinction_g2g { gv.get(0, h) } else { f2v.get(d as usize, h) };
            out.as_mut_slice()[idx] = half * (a + b);
        }
        let rg = self.rg(f1) || self.rg(f2) || self.rg(g2g);
        self.push(out, Op::PairBias { f1, f2, g2g, lookup }, rg)
    }

    /// Per-row `-log softmax(logits)[label]`, returned as a `rows x 1` column.
    pub fn cross_entropy_rows(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), labels.len(), "one label per row");
        let probs = softmax_rows(lv);
        let mut out = Tensor::zeros(labels.len(), 1);
        for (i, &l) in labels.iter().enumerate() {
            let row = lv.row_slice(i);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            out.set(i, 0, lse - row[l]);
        }
        let rg = self.rg(logits);
        self.push(out, Op::CrossEntropyRows { logits, labels: labels.to_vec(), probs }, rg)
    }

    /// Mean over the selected rows, `1 x m`. An empty selection yields zeros.
    pub fn mean_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let xv = self.value(x);
        let m = xv.cols();
        let mut out = Tensor::zeros(1, m);
        if !rows.is_empty() {
            let nf = T::count(rows.len());
            for &r in rows {
                for (o, &v) in out.row_slice_mut(0).iter_mut().zip(xv.row_slice(r)) {
                    *o += v;
                }
            }
            out.scale_assign(T::one() / nf);
        }
        let rg = self.rg(x);
        self.push(out, Op::MeanRows(x, rows.to_vec()), rg)
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let shape = self.shape(terms[0].0);
        let mut out = Tensor::zeros(shape.0, shape.1);
        for &(v, w) in terms {
            let vv = self.value(v);
            assert_eq!(vv.shape(), shape, "weighted_sum shape mismatch");
            for (o, &x) in out.as_mut_slice().iter_mut().zip(vv.as_slice()) {
                *o += w * x;
            }
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(out, Op::WeightedSum(terms.to_vec()), rg)
    }

    /// Gradient of the scalar `loss` with respect to every parameter on the tape.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(1, 1, T::one()));
        let mut out = Gradients::new(self.params.len());

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop(&node.op, i, &g, &mut grads, &mut out);
        }
        out
    }

    fn backprop(
        &self,
        op: &Op<T>,
        idx: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        out: &mut Gradients<T>,
    ) {
        match op {
            Op::Leaf => {}
            Op::Param(id) => out.accumulate(*id, g),
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(*a);
                let m = self.shape(*b).1;
                if self.rg(*a) {
                    let ga = slot(grads, *a, n, k);
                    matmul_nt_into(g.as_slice(), self.value(*b).as_slice(), ga.as_mut_slice(), n, m, k);
                }
                if self.rg(*b) {
                    let gb = slot(grads, *b, k, m);
                    matmul_tn_into(self.value(*a).as_slice(), g.as_slice(), gb.as_mut_slice(), n, k, m);
                }
            }
            Op::MatMulNt(a, b) => {
                // c = a b^T: da = g b, db = g^T a
                let (n, k) = self.shape(*a);
                let m = self.shape(*b).0;
                if self.rg(*a) {
                    let ga = slot(grads, *a, n, k);
                    matmul_into(g.as_slice(), self.value(*b).as_slice(), ga.as_mut_slice(), n, m, k);
                }
                if self.rg(*b) {
                    let gb = slot(grads, *b, m, k);
                    matmul_tn_into(g.as_slice(), self.value(*a).as_slice(), gb.as_mut_slice(), n, m, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        acc(grads, v, g);
                    }
                }
            }
            Op::AddRow(x, row) => {
                if self.rg(*x) {
                    acc(grads, *x, g);
                }
                if self.rg(*row) {
                    let m = g.cols();
                    let gr = slot(grads, *row, 1, m);
                    for i in 0..g.rows() {
                        for (o, &v) in gr.row_slice_mut(0).iter_mut().zip(g.row_slice(i)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::AddConst(x) => acc(grads, *x, g),
            Op::Scale(x, s) => acc(grads, *x, &g.map(|v| v * *s)),
            Op::MulConst(x, mask) => {
                let mut gx = g.clone();
                for (o, &m) in gx.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                    *o *= m;
                }
                acc(grads, *x, &gx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                for (o, &v) in gx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                    *o *= gelu_grad(v);
                }
                acc(grads, *x, &gx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, m) = xhat.shape();
                let gv = self.value(*gamma).as_slice().to_vec();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = Tensor::zeros(1, m);
                    let mut db = Tensor::zeros(1, m);
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g.get(i, j);
                            dg.as_mut_slice()[j] += gij * xhat.get(i, j);
                            db.as_mut_slice()[j] += gij;
                        }
                    }
                    if self.rg(*gamma) {
                        acc(grads, *gamma, &dg);
                    }
                    if self.rg(*beta) {
                        acc(grads, *beta, &db);
                    }
                }
                if self.rg(*x) {
                    let mf = T::count(m);
                    let gx = slot(grads, *x, n, m);
                    for i in 0..n {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..m {
                            let dh = g.get(i, j) * gv[j];
                            s1 += dh;
                            s2 += dh * xhat.get(i, j);
                        }
                        for j in 0..m {
                            let dh = g.get(i, j) * gv[j];
                            let v = inv_std[i] / mf * (mf * dh - s1 - xhat.get(i, j) * s2);
                            gx.as_mut_slice()[i * m + j] += v;
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let y = match &self.nodes[idx].val {
                    Val::Owned(t) => t,
                    Val::Param(_) => unreachable!(),
                };
                let (n, m) = y.shape();
                let gx = slot(grads, *x, n, m);
                for i in 0..n {
                    let yr = y.row_slice(i);
                    let gr = g.row_slice(i);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..m {
                        gx.as_mut_slice()[i * m + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::SliceCols(x, start) => {
                let (n, m) = self.shape(*x);
                let gx = slot(grads, *x, n, m);
                for i in 0..n {
                    for j in 0..g.cols() {
                        gx.as_mut_slice()[i * m + start + j] += g.get(i, j);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (n, w) = self.shape(p);
                    if self.rg(p) {
                        let gp = slot(grads, p, n, w);
                        for i in 0..n {
                            for j in 0..w {
                                gp.as_mut_slice()[i * w + j] += g.get(i, off + j);
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::GatherRows(x, rows) => {
                if !self.rg(*x) {
                    return;
                }
                let (n, m) = self.shape(*x);
                if let Op::Param(id) = self.nodes[x.0].op {
                    // scatter straight into the parameter gradient
                    let gp = out.slot_mut(id, n, m);
                    scatter_rows(gp, rows, g);
                } else {
                    let gx = slot(grads, *x, n, m);
                    scatter_rows(gx, rows, g);
                }
            }
            Op::StackRows(sources) => {
                for (i, &(v, r)) in sources.iter().enumerate() {
                    if !self.rg(v) {
                        continue;
                    }
                    let (n, m) = self.shape(v);
                    let gv = slot(grads, v, n, m);
                    for (o, &x) in gv.row_slice_mut(r).iter_mut().zip(g.row_slice(i)) {
                        *o += x;
                    }
                }
            }
            Op::RepeatRow(row) => {
                let m = g.cols();
                let gr = slot(grads, *row, 1, m);
                for i in 0..g.rows() {
                    for (o, &v) in gr.row_slice_mut(0).iter_mut().zip(g.row_slice(i)) {
                        *o += v;
                    }
                }
            }
            Op::Pna { x, groups, arg_max, arg_min } => {
                let xv = self.value(*x);
                let (n, m) = xv.shape();
                let y = match &self.nodes[idx].val {
                    Val::Owned(t) => t,
                    Val::Param(_) => unreachable!(),
                };
                let gx = slot(grads, *x, n, m);
                for (gi, rows) in groups.iter().enumerate() {
                    let nf = T::count(rows.len());
                    for j in 0..m {
                        let gmean = g.get(gi, j) / nf;
                        for &r in rows {
                            gx.as_mut_slice()[r * m + j] += gmean;
                        }
                        gx.as_mut_slice()[arg_max[gi * m + j] * m + j] += g.get(gi, m + j);
                        gx.as_mut_slice()[arg_min[gi * m + j] * m + j] += g.get(gi, 2 * m + j);
                        let std = y.get(gi, 3 * m + j);
                        if std > T::zero() {
                            let mean = y.get(gi, j);
                            let gs = g.get(gi, 3 * m + j) / (nf * std);
                            for &r in rows {
                                gx.as_mut_slice()[r * m + j] += gs * (xv.get(r, j) - mean);
                            }
                        }
                    }
                }
            }
            Op::PairBias { f1, f2, g2g, lookup } => {
                let half = T::c(0.5);
                let h = lookup.head;
                let mut d1 = Tensor::zeros(self.shape(*f1).0, self.shape(*f1).1);
                let mut d2 = Tensor::zeros(self.shape(*f2).0, self.shape(*f2).1);
                let mut dg = Tensor::zeros(1, self.shape(*g2g).1);
                let (c1, c2) = (d1.cols(), d2.cols());
                for (idx, &gv) in g.as_slice().iter().enumerate() {
                    let gh = half * gv;
                    let p = lookup.distance_buckets[idx];
                    let d = lookup.distinction_buckets[idx];
                    if p == lookup.distance_g2g {
                        dg.as_mut_slice()[h] += gh;
                    } else {
                        d1.as_mut_slice()[p as usize * c1 + h] += gh;
                    }
                    if d == lookup.distinction_g2g {
                        dg.as_mut_slice()[h] += gh;
                    } else {
                        d2.as_mut_slice()[d as usize * c2 + h] += gh;
                    }
                }
                for (v, d) in [(*f1, d1), (*f2, d2), (*g2g, dg)] {
                    if self.rg(v) {
                        acc(grads, v, &d);
                    }
                }
            }
            Op::CrossEntropyRows { logits, labels, probs } => {
                let (n, m) = probs.shape();
                let gx = slot(grads, *logits, n, m);
                for (i, &l) in labels.iter().enumerate() {
                    let gi = g.get(i, 0);
                    for j in 0..m {
                        let onehot = if j == l { T::one() } else { T::zero() };
                        gx.as_mut_slice()[i * m + j] += gi * (probs.get(i, j) - onehot);
                    }
                }
            }
            Op::MeanRows(x, rows) => {
                if rows.is_empty() {
                    return;
                }
                let (n, m) = self.shape(*x);
                let nf = T::count(rows.len());
                let gx = slot(grads, *x, n, m);
                for &r in rows {
                    for (o, &v) in gx.row_slice_mut(r).iter_mut().zip(g.row_slice(0)) {
                        *o += v / nf;
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.rg(v) {
                        acc(grads, v, &g.map(|x| x * w));
                    }
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, rows: usize, cols: usize) -> &mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: &Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(g),
        s @ None => *s = Some(g.clone()),
    }
}

fn scatter_rows<T: Scalar>(target: &mut Tensor<T>, rows: &[usize], g: &Tensor<T>) {
    for (i, &r) in rows.iter().enumerate() {
        for (o, &v) in target.row_slice_mut(r).iter_mut().zip(g.row_slice(i)) {
            *o += v;
        }
    }
}

pub(crate) fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, m) = x.shape();
    let mut out = Tensor::zeros(n, m);
    for i in 0..n {
        let row = x.row_slice(i);
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for j in 0..m {
            let e = (row[j] - mx).exp();
            out.set(i, j, e);
            sum += e;
        }
        for v in out.row_slice_mut(i) {
            *v /= sum;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::c(GELU_C);
    let inner = c * (x + T::c(0.044715) * x * x * x);
    T::c(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::c(GELU_C);
    let inner = c * (x + T::c(0.044715) * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::c(3.0 * 0.044715) * x * x);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    /// Central differences of `f` around every entry of parameter `id`.
    fn check<F>(store: &mut ParamStore<f64>, id: ParamId, f: F)
    where
        F: Fn(&mut Tape<'_, f64>) -> Var,
    {
        let analytic = {
            let mut tape = Tape::new(store);
            let loss = f(&mut tape);
            tape.backward(loss).get(id).cloned().unwrap()
        };
        let h = 1e-6;
        for k in 0..store.value(id).len() {
            let orig = store.value(id).as_slice()[k];
            store.value_mut(id).as_mut_slice()[k] = orig + h;
            let up = {
                let mut t = Tape::new(store);
                let l = f(&mut t);
                t.scalar(l)
            };
            store.value_mut(id).as_mut_slice()[k] = orig - h;
            let down = {
                let mut t = Tape::new(store);
                let l = f(&mut t);
                t.scalar(l)
            };
            store.value_mut(id).as_mut_slice()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.as_slice()[k];
            assert!((a - numeric).abs() <= 1e-6 * (1.0 + a.abs()), "entry {k}: {a} vs {numeric}");
        }
    }

    fn store_with(rows: usize, cols: usize, seed: u64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add(
            "x",
            ParamGroup::Other,
            Tensor::from_fn(rows, cols, |i, j| ((i * 7 + j * 3 + seed as usize) % 11) as f64 * 0.3 - 1.4),
        );
        (s, id)
    }

    #[test]
    fn layer_norm_softmax_gelu_chain() {
        let (mut s, x) = store_with(3, 4, 1);
        let gamma = s.add("g", ParamGroup::Other, Tensor::row(vec![1.1, 0.9, 1.3, 0.7]));
        let beta = s.add("b", ParamGroup::Other, Tensor::row(vec![0.1, -0.2, 0.0, 0.3]));
        let f = |t: &mut Tape<'_, f64>| {
            let xv = t.param(x);
            let (gv, bv) = (t.param(gamma), t.param(beta));
            let y = t.layer_norm(xv, gv, bv);
            let y = t.gelu(y);
            let a = t.matmul_nt(y, y);
            let a = t.softmax_rows(a);
            let z = t.matmul(a, y);
            let ce = t.cross_entropy_rows(z, &[0, 3, 1]);
            t.mean_rows(ce, &[0, 1, 2])
        };
        check(&mut s, x, f);
        check(&mut s, gamma, f);
        check(&mut s, beta, f);
    }

    #[test]
    fn pna_and_gather_grads() {
        let (mut s, x) = store_with(5, 3, 2);
        let f = |t: &mut Tape<'_, f64>| {
            let xv = t.param(x);
            let rows = t.gather_rows(xv, &[4, 0, 2, 2]);
            let p = t.pna(rows, &[vec![0, 1, 2], vec![1, 3], vec![0]]);
            let sq = t.matmul_nt(p, p);
            let col = t.slice_cols(sq, 1, 1);
            let w = t.weighted_sum(&[(col, 0.5)]);
            t.mean_rows(w, &[0, 2])
        };
        check(&mut s, x, f);
    }

    #[test]
    fn pair_bias_grads_reach_all_tables() {
        let mut s = ParamStore::new();
        let f1 = s.add("f1", ParamGroup::Encoder, Tensor::from_fn(4, 2, |i, j| i as f64 * 0.1 - j as f64 * 0.2));
        let f2 = s.add("f2", ParamGroup::Encoder, Tensor::from_fn(3, 2, |i, j| i as f64 * 0.3 + j as f64 * 0.1));
        let g = s.add("g2g", ParamGroup::Encoder, Tensor::row(vec![0.05, -0.1]));
        let lookup = BiasLookup {
            n: 3,
            distance_buckets: vec![1, 2, 4, 0, 1, 2, 4, 0, 1],
            distinction_buckets: vec![0, 1, 3, 2, 0, 2, 3, 1, 0],
            head: 1,
            distance_g2g: 4,
            distinction_g2g: 3,
        };
        let f = |t: &mut Tape<'_, f64>| {
            let (a, b, c) = (t.param(f1), t.param(f2), t.param(g));
            let bias = t.pair_bias(a, b, c, lookup.clone());
            let sm = t.softmax_rows(bias);
            let ce = t.cross_entropy_rows(sm, &[0, 1, 2]);
            t.mean_rows(ce, &[0, 1, 2])
        };
        check(&mut s, f1, f);
        check(&mut s, f2, f);
        check(&mut s, g, f);
    }
}
