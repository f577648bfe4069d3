//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters live in
//! a [`ParamStore`] and enter the tape as leaves; [`Tape::backward`] returns
//! the gradient of a scalar with respect to every parameter that was used.
//!
//! The op set is exactly what the tracking network needs: dense layers,
//! attention, sparse voxel convolution, scatter-max, trilinear sampling and
//! the two losses.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{gemm, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Input/output row pairs for each kernel offset of a sparse convolution.
#[derive(Debug, Clone)]
pub struct KernelMap {
    pub n_in: usize,
    pub n_out: usize,
    pub offsets: Vec<Vec<(u32, u32)>>,
}

impl KernelMap {
    pub fn kernel_volume(&self) -> usize {
        self.offsets.len()
    }

    pub fn pair_count(&self) -> usize {
        self.offsets.iter().map(Vec::len).sum()
    }
}

/// Eight (source row, weight) taps per query point.
#[derive(Debug, Clone)]
pub struct InterpMap {
    pub n_src: usize,
    pub taps: Vec<[(u32, f64); 8]>,
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddConst(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Clamp01(Var),
    ConcatCols(Vec<Var>),
    BroadcastRows(Var),
    ColMax(Var, Vec<usize>),
    SoftmaxRows(Var),
    L2NormRows(Var, Vec<f64>),
    GatherRows(Var, Rc<Vec<usize>>),
    SparseConv(Var, Var, Rc<KernelMap>),
    ScatterMax(Var, Vec<u32>),
    Interp(Var, Rc<InterpMap>),
    CrossEntropy(Var, Rc<Vec<usize>>, usize),
    MeanSqRowDist(Var, Rc<Mat>),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

const NO_SOURCE: u32 = u32::MAX;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar");
        m.data[0]
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (used by finite-difference checks).
    pub fn input(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.cols, bm.rows, "matmul shape mismatch {:?} x {:?}", am, bm);
        let mut out = Mat::zeros(am.rows, bm.cols);
        gemm(&am.data, am.rows, am.cols, false, &bm.data, bm.rows, bm.cols, false, &mut out.data, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.cols, bm.cols, "matmul_nt shape mismatch {:?} x {:?}", am, bm);
        let mut out = Mat::zeros(am.rows, bm.rows);
        gemm(&am.data, am.rows, am.cols, false, &bm.data, bm.rows, bm.cols, true, &mut out.data, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulNT(a, b), ng)
    }

    /// Adds a `1×C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!((1, am.cols), rm.shape(), "add_row shape mismatch");
        let mut out = am.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rm.data) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by a `1×C` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!((1, am.cols), rm.shape(), "mul_row shape mismatch");
        let mut out = am.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rm.data) {
                *o *= b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::MulRow(a, row), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.shape(), bm.shape(), "add shape mismatch");
        let mut out = am.clone();
        out.add_assign(bm);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.shape(), bm.shape(), "sub shape mismatch");
        let out = Mat::from_vec(
            am.rows,
            am.cols,
            am.data.iter().zip(&bm.data).map(|(x, y)| x - y).collect(),
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Multiplies `a` by a `1×1` variable.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let out = self.value(a).scale(sv);
        let ng = self.ng(a) || self.ng(s);
        self.push(out, Op::ScaleBy(a, s), ng)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let am = self.value(a);
        let out = Mat::from_vec(am.rows, am.cols, am.data.iter().map(|v| v + c).collect());
        let ng = self.ng(a);
        self.push(out, Op::AddConst(a), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let am = self.value(a);
        let out = Mat::from_vec(am.rows, am.cols, am.data.iter().map(|&v| f(v)).collect());
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Clamps into `[0, 1]`; gradient passes only where the input was inside.
    pub fn clamp01(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.clamp(0.0, 1.0), Op::Clamp01(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pm = self.value(p);
            assert_eq!(pm.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + pm.cols].copy_from_slice(pm.row(r));
            }
            off += pm.cols;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Repeats a `1×C` row `n` times.
    pub fn broadcast_rows(&mut self, row: Var, n: usize) -> Var {
        let rm = self.value(row);
        assert_eq!(rm.rows, 1, "broadcast_rows expects a single row");
        let mut out = Mat::zeros(n, rm.cols);
        for r in 0..n {
            out.row_mut(r).copy_from_slice(&rm.data);
        }
        let ng = self.ng(row);
        self.push(out, Op::BroadcastRows(row), ng)
    }

    /// Channel-wise maximum over rows (global max pooling), `N×C -> 1×C`.
    /// Ties resolve to the lowest row.
    pub fn col_max(&mut self, a: Var) -> Var {
        let am = self.value(a);
        assert!(am.rows > 0, "col_max over zero rows");
        let mut arg = vec![0usize; am.cols];
        let mut best = am.row(0).to_vec();
        for r in 1..am.rows {
            for (c, &v) in am.row(r).iter().enumerate() {
                if v > best[c] {
                    best[c] = v;
                    arg[c] = r;
                }
            }
        }
        let ng = self.ng(a);
        self.push(Mat::from_vec(1, best.len(), best), Op::ColMax(a, arg), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        assert!(am.cols > 0, "softmax over zero columns");
        let mut out = am.clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        const EPS: f64 = 1e-12;
        let am = self.value(a);
        let mut out = am.clone();
        let mut norms = Vec::with_capacity(am.rows);
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(EPS);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let ng = self.ng(a);
        self.push(out, Op::L2NormRows(a, norms), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let out = self.value(a).select_rows(&idx);
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, idx), ng)
    }

    /// Sparse convolution: `y[o] = Σ_k Σ_{(i,o)∈map_k} x[i]·W_k` with
    /// `weight` stored as `(K·C_in)×C_out`.
    pub fn sparse_conv(&mut self, x: Var, weight: Var, map: Rc<KernelMap>) -> Var {
        let (xm, wm) = (self.value(x), self.value(weight));
        let cin = xm.cols;
        assert_eq!(xm.rows, map.n_in, "sparse_conv input rows mismatch");
        assert_eq!(wm.rows, map.kernel_volume() * cin, "sparse_conv weight rows mismatch");
        let cout = wm.cols;
        let mut out = Mat::zeros(map.n_out, cout);
        let mut gathered = Vec::new();
        let mut prod = Vec::new();
        for (k, pairs) in map.offsets.iter().enumerate() {
            if pairs.is_empty() {
                continue;
            }
            gathered.clear();
            for &(i, _) in pairs {
                gathered.extend_from_slice(xm.row(i as usize));
            }
            prod.clear();
            prod.resize(pairs.len() * cout, 0.0);
            let wk = &wm.data[k * cin * cout..(k + 1) * cin * cout];
            gemm(&gathered, pairs.len(), cin, false, wk, cin, cout, false, &mut prod, 0.0);
            for (p, &(_, o)) in pairs.iter().enumerate() {
                for (dst, src) in out.row_mut(o as usize).iter_mut().zip(&prod[p * cout..(p + 1) * cout]) {
                    *dst += src;
                }
            }
        }
        let ng = self.ng(x) || self.ng(weight);
        self.push(out, Op::SparseConv(x, weight, map), ng)
    }

    /// Channel-wise max of the rows assigned to each cell; empty cells are zero.
    pub fn scatter_max(&mut self, features: Var, cells: &[usize], n_cells: usize) -> Var {
        let fm = self.value(features);
        assert_eq!(fm.rows, cells.len(), "scatter_max: one cell per row required");
        let c = fm.cols;
        let mut out = Mat::zeros(n_cells, c);
        let mut src = vec![NO_SOURCE; n_cells * c];
        for (r, &cell) in cells.iter().enumerate() {
            assert!(cell < n_cells, "scatter_max cell out of range");
            for (ch, &v) in fm.row(r).iter().enumerate() {
                let slot = cell * c + ch;
                if src[slot] == NO_SOURCE || v > out.data[slot] {
                    out.data[slot] = v;
                    src[slot] = r as u32;
                }
            }
        }
        let ng = self.ng(features);
        self.push(out, Op::ScatterMax(features, src), ng)
    }

    pub fn interpolate(&mut self, src: Var, map: Rc<InterpMap>) -> Var {
        let sm = self.value(src);
        assert_eq!(sm.rows, map.n_src, "interpolate source rows mismatch");
        let mut out = Mat::zeros(map.taps.len(), sm.cols);
        for (q, taps) in map.taps.iter().enumerate() {
            let row = out.row_mut(q);
            for &(i, w) in taps {
                if w == 0.0 {
                    continue;
                }
                for (o, s) in row.iter_mut().zip(sm.row(i as usize)) {
                    *o += w * s;
                }
            }
        }
        let ng = self.ng(src);
        self.push(out, Op::Interp(src, map), ng)
    }

    /// Mean softmax cross-entropy over every (row, group) where each row holds
    /// `groups` consecutive blocks of `bins` logits. `targets` is row-major
    /// `rows×groups`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Rc<Vec<usize>>, bins: usize) -> Var {
        let lm = self.value(logits);
        assert!(bins >= 2 && lm.cols % bins == 0, "cross_entropy: bad bin layout");
        let groups = lm.cols / bins;
        assert_eq!(targets.len(), lm.rows * groups, "cross_entropy target count mismatch");
        let mut total = 0.0;
        for r in 0..lm.rows {
            let row = lm.row(r);
            for g in 0..groups {
                let block = &row[g * bins..(g + 1) * bins];
                let t = targets[r * groups + g];
                assert!(t < bins, "cross_entropy target out of range");
                total += log_sum_exp(block) - block[t];
            }
        }
        let n = (lm.rows * groups).max(1) as f64;
        let ng = self.ng(logits);
        self.push(Mat::scalar(total / n), Op::CrossEntropy(logits, targets, bins), ng)
    }

    /// Mean over rows of the squared Euclidean distance to `target`.
    pub fn mean_sq_row_dist(&mut self, pred: Var, target: Rc<Mat>) -> Var {
        let pm = self.value(pred);
        assert_eq!(pm.shape(), target.shape(), "mean_sq_row_dist shape mismatch");
        let total: f64 = pm.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum();
        let out = total / pm.rows.max(1) as f64;
        let ng = self.ng(pred);
        self.push(Mat::scalar(out), Op::MeanSqRowDist(pred, target), ng)
    }

    /// Gradients of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params = Vec::new();
        for (&id, &v) in &self.params {
            if let Some(g) = &grads[v.0] {
                params.push((id, g.clone()));
            }
        }
        params.sort_by_key(|(id, _)| *id);
        Gradients { nodes: grads, params }
    }

    fn backprop_node(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let acc = |v: Var, d: Mat, grads: &mut [Option<Mat>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut da = Mat::zeros(am.rows, am.cols);
                    gemm(&g.data, g.rows, g.cols, false, &bm.data, bm.rows, bm.cols, true, &mut da.data, 0.0);
                    acc(*a, da, grads);
                }
                if self.ng(*b) {
                    let mut db = Mat::zeros(bm.rows, bm.cols);
                    gemm(&am.data, am.rows, am.cols, true, &g.data, g.rows, g.cols, false, &mut db.data, 0.0);
                    acc(*b, db, grads);
                }
            }
            Op::MatMulNT(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut da = Mat::zeros(am.rows, am.cols);
                    gemm(&g.data, g.rows, g.cols, false, &bm.data, bm.rows, bm.cols, false, &mut da.data, 0.0);
                    acc(*a, da, grads);
                }
                if self.ng(*b) {
                    let mut db = Mat::zeros(bm.rows, bm.cols);
                    gemm(&g.data, g.rows, g.cols, true, &am.data, am.rows, am.cols, false, &mut db.data, 0.0);
                    acc(*b, db, grads);
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*row) {
                    acc(*row, Mat::from_vec(1, g.cols, column_sums(g)), grads);
                }
                acc(*a, g.clone(), grads);
            }
            Op::MulRow(a, row) => {
                let (am, rm) = (self.value(*a), self.value(*row));
                if self.ng(*a) {
                    let mut da = g.clone();
                    for r in 0..da.rows {
                        for (d, s) in da.row_mut(r).iter_mut().zip(&rm.data) {
                            *d *= s;
                        }
                    }
                    acc(*a, da, grads);
                }
                if self.ng(*row) {
                    let mut dr = vec![0.0; rm.cols];
                    for r in 0..g.rows {
                        for ((d, gv), av) in dr.iter_mut().zip(g.row(r)).zip(am.row(r)) {
                            *d += gv * av;
                        }
                    }
                    acc(*row, Mat::from_vec(1, rm.cols, dr), grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.scale(-1.0), grads);
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s), grads),
            Op::ScaleBy(a, s) => {
                let sv = self.scalar(*s);
                if self.ng(*s) {
                    let dot: f64 = g.data.iter().zip(&self.value(*a).data).map(|(x, y)| x * y).sum();
                    acc(*s, Mat::scalar(dot), grads);
                }
                acc(*a, g.scale(sv), grads);
            }
            Op::AddConst(a) => acc(*a, g.clone(), grads),
            Op::Relu(a) => {
                let am = self.value(*a);
                let d = zip_map(g, am, |gv, x| if x > 0.0 { gv } else { 0.0 });
                acc(*a, d, grads);
            }
            Op::Tanh(a) => {
                let d = zip_map(g, &node.value, |gv, y| gv * (1.0 - y * y));
                acc(*a, d, grads);
            }
            Op::Exp(a) => {
                let d = zip_map(g, &node.value, |gv, y| gv * y);
                acc(*a, d, grads);
            }
            Op::Clamp01(a) => {
                let am = self.value(*a);
                let d = zip_map(g, am, |gv, x| if (0.0..=1.0).contains(&x) { gv } else { 0.0 });
                acc(*a, d, grads);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).cols;
                    if self.ng(p) {
                        let mut d = Mat::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        acc(p, d, grads);
                    }
                    off += cols;
                }
            }
            Op::BroadcastRows(row) => {
                acc(*row, Mat::from_vec(1, g.cols, column_sums(g)), grads);
            }
            Op::ColMax(a, arg) => {
                let am = self.value(*a);
                let mut d = Mat::zeros(am.rows, am.cols);
                for (c, &r) in arg.iter().enumerate() {
                    d.data[r * am.cols + c] += g.data[c];
                }
                acc(*a, d, grads);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, yv), gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - dot);
                    }
                }
                acc(*a, d, grads);
            }
            Op::L2NormRows(a, norms) => {
                let y = &node.value;
                let mut d = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, yv), gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *dv = (gv - yv * dot) / norms[r];
                    }
                }
                acc(*a, d, grads);
            }
            Op::GatherRows(a, idx) => {
                let am = self.value(*a);
                let mut d = Mat::zeros(am.rows, am.cols);
                for (o, &i) in idx.iter().enumerate() {
                    for (dv, gv) in d.row_mut(i).iter_mut().zip(g.row(o)) {
                        *dv += gv;
                    }
                }
                acc(*a, d, grads);
            }
            Op::SparseConv(x, w, map) => {
                let (xm, wm) = (self.value(*x), self.value(*w));
                let (cin, cout) = (xm.cols, wm.cols);
                let mut dx = self.ng(*x).then(|| Mat::zeros(xm.rows, cin));
                let mut dw = self.ng(*w).then(|| Mat::zeros(wm.rows, cout));
                let mut gout = Vec::new();
                let mut buf = Vec::new();
                for (k, pairs) in map.offsets.iter().enumerate() {
                    if pairs.is_empty() {
                        continue;
                    }
                    gout.clear();
                    for &(_, o) in pairs {
                        gout.extend_from_slice(g.row(o as usize));
                    }
                    let wk = &wm.data[k * cin * cout..(k + 1) * cin * cout];
                    if let Some(dx) = dx.as_mut() {
                        buf.clear();
                        buf.resize(pairs.len() * cin, 0.0);
                        gemm(&gout, pairs.len(), cout, false, wk, cin, cout, true, &mut buf, 0.0);
                        for (p, &(i, _)) in pairs.iter().enumerate() {
                            for (dv, bv) in dx.row_mut(i as usize).iter_mut().zip(&buf[p * cin..(p + 1) * cin]) {
                                *dv += bv;
                            }
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        buf.clear();
                        for &(i, _) in pairs {
                            buf.extend_from_slice(xm.row(i as usize));
                        }
                        let dwk = &mut dw.data[k * cin * cout..(k + 1) * cin * cout];
                        gemm(&buf, pairs.len(), cin, true, &gout, pairs.len(), cout, false, dwk, 1.0);
                    }
                }
                if let Some(dx) = dx {
                    acc(*x, dx, grads);
                }
                if let Some(dw) = dw {
                    acc(*w, dw, grads);
                }
            }
            Op::ScatterMax(f, src) => {
                let fm = self.value(*f);
                let c = fm.cols;
                let mut d = Mat::zeros(fm.rows, c);
                for (slot, &r) in src.iter().enumerate() {
                    if r != NO_SOURCE {
                        d.data[r as usize * c + slot % c] += g.data[slot];
                    }
                }
                acc(*f, d, grads);
            }
            Op::Interp(src, map) => {
                let sm = self.value(*src);
                let mut d = Mat::zeros(sm.rows, sm.cols);
                for (q, taps) in map.taps.iter().enumerate() {
                    for &(i, w) in taps {
                        if w == 0.0 {
                            continue;
                        }
                        for (dv, gv) in d.row_mut(i as usize).iter_mut().zip(g.row(q)) {
                            *dv += w * gv;
                        }
                    }
                }
                acc(*src, d, grads);
            }
            Op::CrossEntropy(logits, targets, bins) => {
                let lm = self.value(*logits);
                let groups = lm.cols / bins;
                let scale = g.data[0] / (lm.rows * groups).max(1) as f64;
                let mut d = lm.clone();
                for r in 0..d.rows {
                    let row = d.row_mut(r);
                    for gi in 0..groups {
                        let block = &mut row[gi * bins..(gi + 1) * bins];
                        softmax_in_place(block);
                        block[targets[r * groups + gi]] -= 1.0;
                        block.iter_mut().for_each(|v| *v *= scale);
                    }
                }
                acc(*logits, d, grads);
            }
            Op::MeanSqRowDist(pred, target) => {
                let pm = self.value(*pred);
                let s = 2.0 * g.data[0] / pm.rows.max(1) as f64;
                let d = zip_map(pm, target, |p, t| s * (p - t));
                acc(*pred, d, grads);
            }
        }
    }
}

fn zip_map(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    Mat::from_vec(a.rows, a.cols, a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect())
}

fn column_sums(m: &Mat) -> Vec<f64> {
    let mut s = vec![0.0; m.cols];
    for r in 0..m.rows {
        for (acc, v) in s.iter_mut().zip(m.row(r)) {
            *acc += v;
        }
    }
    s
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in xs.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    xs.iter_mut().for_each(|v| *v /= s);
}

pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: Vec<(ParamId, Mat)>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Mat> {
        self.nodes[v.0].as_ref()
    }

    pub fn params(&self) -> &[(ParamId, Mat)] {
        &self.params
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Mat,
}

/// Named trainable tensors plus their accumulated gradients.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    grads: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.grads.push(Mat::zeros(value.rows, value.cols));
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.data.len()).sum()
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in &grads.params {
            self.grads[id.0].add_assign(g);
        }
    }

    pub fn grad(&self, id: ParamId) -> &Mat {
        &self.grads[id.0]
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.grads.iter().all(Mat::is_finite)
    }

    /// Replaces values of parameters with matching names and shapes.
    pub fn load_values(&mut self, params: &[Param]) -> Result<(), String> {
        if params.len() != self.params.len() {
            return Err(format!("expected {} tensors, found {}", self.params.len(), params.len()));
        }
        for (dst, src) in self.params.iter_mut().zip(params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(format!(
                    "tensor mismatch: expected {} {:?}, found {} {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                ));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }
}

/// Adam optimizer state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Mat> = store.params.iter().map(|p| Mat::zeros(p.value.rows, p.value.cols)).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in store.params.iter_mut().zip(&store.grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.value.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    /// First and second moment estimates, one per parameter.
    pub fn moments(&self) -> (&[Mat], &[Mat]) {
        (&self.m, &self.v)
    }

    /// Rebuilds an optimizer from saved state.
    pub fn from_parts(lr: f64, beta1: f64, beta2: f64, eps: f64, step: u64, m: Vec<Mat>, v: Vec<Mat>) -> Self {
        Self { lr, beta1, beta2, eps, step, m, v }
    }

    pub fn matches(&self, store: &ParamStore) -> bool {
        self.m.len() == store.len()
            && self.m.iter().zip(store.params()).all(|(m, p)| m.shape() == p.value.shape())
    }
}

/// He-uniform initialisation, `U(-√(6/fan_in), √(6/fan_in))`: keeps the
/// activation variance roughly constant through ReLU layers, which matters
/// here because the networks have no normalisation layers.
pub fn init_he<R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect())
}

/// Uniform fan-in initialisation, `U(-1/√fan_in, 1/√fan_in)`.
pub fn init_uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect())
}

/// Outcome of [`check_param_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Compares tape gradients of the scalar built by `f` against central finite
/// differences for every `stride`-th entry of each listed parameter. Relative
/// errors use `max(|analytic|, |numeric|, floor)` as denominator.
pub fn check_param_gradients(
    store: &mut ParamStore,
    ids: &[ParamId],
    stride: usize,
    floor: f64,
    f: impl Fn(&ParamStore) -> (Tape, Var),
) -> GradCheck {
    let h = 1e-6;
    let (tape, loss) = f(store);
    let grads = tape.backward(loss);
    store.zero_grad();
    store.accumulate(&grads);
    let mut report = GradCheck { checked: 0, max_rel_err: 0.0, worst: String::new() };
    for &id in ids {
        let analytic = store.grad(id).clone();
        for i in (0..analytic.data.len()).step_by(stride.max(1)) {
            let orig = store.value(id).data[i];
            let mut eval = |x: f64| {
                store.value_mut(id).data[i] = x;
                let (t, l) = f(store);
                t.scalar(l)
            };
            let numeric = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
            store.value_mut(id).data[i] = orig;
            let a = analytic.data[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{}[{i}]: analytic {a:e}, numeric {numeric:e}", store.name(id));
            }
        }
    }
    store.zero_grad();
    report
}
