//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! for every node that (transitively) depends on a gradient-requiring leaf.
//! Graphs are built per sample and dropped after the backward pass.

use std::cmp::Ordering;
use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm_into, lit, Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Param,
    /// `a · op(b)`; `tb` transposes `b`.
    MatMul { a: Var, b: Var, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Silu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { a: Var, rstd: Vec<T> },
    GatherRows { a: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    MeanRows(Var),
    MaskRows { a: Var, keep: Vec<bool> },
    AssembleMean { parts: Vec<(Var, Vec<usize>)>, counts: Vec<usize> },
    Mse { a: Var, target: Matrix<T> },
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grad_all_params: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(512), params: HashMap::new(), grad_all_params: false }
    }

    /// Track gradients for frozen parameters too (used by gradient checks).
    pub fn with_all_param_grads(mut self) -> Self {
        self.grad_all_params = true;
        self
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, m: Matrix<T>) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// A leaf whose gradient can be read back after [`Graph::backward`].
    pub fn input(&mut self, m: Matrix<T>) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let requires = self.grad_all_params || store.is_trainable(id);
        let v = self.push(store.value(id).clone(), Op::Param, requires);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = Matrix::matmul(self.value(a), false, self.value(b), false);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul { a, b, tb: false }, rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = Matrix::matmul(self.value(a), false, self.value(b), true);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul { a, b, tb: true }, rg)
    }

    /// `x · wᵀ + bias` with `w` shaped `out × in` and `bias` a `1 × out` row.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Var {
        let y = self.matmul_bt(x, w);
        match bias {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row expects a 1x{c} row");
        let rv = self.value(row).data().to_vec();
        let av = self.value(a);
        let value = Matrix::from_fn(r, c, |i, j| av.get(i, j) + rv[j]);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// Multiplies every row of `a` elementwise by a `1 × cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "mul_row expects a 1x{c} row");
        let rv = self.value(row).data().to_vec();
        let av = self.value(a);
        let value = Matrix::from_fn(r, c, |i, j| av.get(i, j) * rv[j]);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// `1 + a`, elementwise.
    pub fn one_plus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| T::one() + x);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x / (T::one() + (-x).exp()));
        let rg = self.rg(a);
        self.push(value, Op::Silu(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu_fwd);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = av.clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a), rg)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        let n = lit::<T>(cols as f64);
        let eps = lit::<T>(eps);
        let mut value = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = av.row(r);
            let mean = x.iter().copied().sum::<T>() / n;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            for (o, &v) in value.row_mut(r).iter_mut().zip(x) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let rg = self.rg(a);
        self.push(value, Op::LayerNorm { a, rstd }, rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(av.row(i));
        }
        let value = Matrix::from_vec(idx.len(), cols, data);
        let rg = self.rg(a);
        self.push(value, Op::GatherRows { a, idx: idx.to_vec() }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Matrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        assert!(start + len <= av.rows(), "slice_rows out of range");
        let value = Matrix::from_vec(len, cols, av.data()[start * cols..(start + len) * cols].to_vec());
        let rg = self.rg(a);
        self.push(value, Op::SliceRows { a, start }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols out of range");
        let value = Matrix::from_fn(av.rows(), len, |r, c| av.get(r, start + c));
        let rg = self.rg(a);
        self.push(value, Op::SliceCols { a, start }, rg)
    }

    /// Column means, as a `1 × cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        assert!(rows > 0, "mean_rows of an empty matrix");
        let inv = T::one() / lit::<T>(rows as f64);
        let mut out = vec![T::zero(); cols];
        for r in 0..rows {
            for (o, &x) in out.iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        for o in &mut out {
            *o *= inv;
        }
        let rg = self.rg(a);
        self.push(Matrix::row_vector(out), Op::MeanRows(a), rg)
    }

    /// Zeroes the rows whose `keep` flag is false.
    pub fn mask_rows(&mut self, a: Var, keep: &[bool]) -> Var {
        let av = self.value(a);
        assert_eq!(keep.len(), av.rows(), "mask length mismatch");
        let mut value = av.clone();
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                value.row_mut(r).iter_mut().for_each(|x| *x = T::zero());
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::MaskRows { a, keep: keep.to_vec() }, rg)
    }

    /// Scatter-mean of row blocks into a `cells × cols` field.
    ///
    /// `parts[k] = (rows_k, cells_k)` writes row `r` of `rows_k` into cell
    /// `cells_k[r]`. Each covered cell receives the mean of its contributions;
    /// contributions are sorted by value and summed along a pairwise tree, so
    /// the result does not depend on the order of `parts`. Uncovered cells are
    /// zero.
    pub fn assemble_mean(&mut self, cells: usize, parts: &[(Var, Vec<usize>)]) -> Var {
        let cols = match parts.first() {
            Some((v, _)) => self.shape(*v).1,
            None => 0,
        };
        let mut per_cell: Vec<Vec<(usize, usize)>> = vec![Vec::new(); cells];
        for (pi, (v, idx)) in parts.iter().enumerate() {
            assert_eq!(self.shape(*v), (idx.len(), cols), "assemble part shape mismatch");
            for (r, &cell) in idx.iter().enumerate() {
                per_cell[cell].push((pi, r));
            }
        }
        let mut value = Matrix::zeros(cells, cols);
        let mut counts = vec![0usize; cells];
        let mut scratch: Vec<&[T]> = Vec::new();
        for (cell, contribs) in per_cell.iter().enumerate() {
            if contribs.is_empty() {
                continue;
            }
            scratch.clear();
            scratch.extend(contribs.iter().map(|&(pi, r)| self.nodes[parts[pi].0 .0].value.row(r)));
            scratch.sort_by(|a, b| cmp_rows(a, b));
            let out = value.row_mut(cell);
            pairwise_sum(&scratch, out);
            let inv = lit::<T>(contribs.len() as f64);
            for o in out.iter_mut() {
                *o /= inv;
            }
            counts[cell] = contribs.len();
        }
        let rg = parts.iter().any(|(v, _)| self.rg(*v));
        self.push(value, Op::AssembleMean { parts: parts.to_vec(), counts }, rg)
    }

    /// Mean squared error against a constant target, as a `1 × 1` value.
    pub fn mse(&mut self, a: Var, target: Matrix<T>) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), target.shape(), "mse shape mismatch");
        let n = lit::<T>(av.len() as f64);
        let s: T = av.data().iter().zip(target.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let rg = self.rg(a);
        self.push(Matrix::filled(1, 1, s / n), Op::Mse { a, target }, rg)
    }

    /// Reverse pass from a scalar (`1 × 1`) node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads, params: self.params.clone() }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, tb } => {
                if self.rg(*a) {
                    let ga = slot(grads, *a, val(*a));
                    // dA = dC · op(b)ᵀ
                    gemm_into(T::one(), g, false, val(*b), !*tb, T::one(), ga);
                }
                if self.rg(*b) {
                    let gb = slot(grads, *b, val(*b));
                    if *tb {
                        gemm_into(T::one(), g, true, val(*a), false, T::one(), gb);
                    } else {
                        gemm_into(T::one(), val(*a), true, g, false, T::one(), gb);
                    }
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    slot(grads, *a, g).add_assign(g);
                }
                if self.rg(*b) {
                    slot(grads, *b, g).add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    slot(grads, *a, g).add_assign(g);
                }
                if self.rg(*b) {
                    let gb = slot(grads, *b, g);
                    for (o, &x) in gb.data_mut().iter_mut().zip(g.data()) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = val(*b);
                    let ga = slot(grads, *a, g);
                    for ((o, &x), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += x * y;
                    }
                }
                if self.rg(*b) {
                    let av = val(*a);
                    let gb = slot(grads, *b, g);
                    for ((o, &x), &y) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += x * y;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.rg(*a) {
                    slot(grads, *a, g).add_assign(g);
                }
                if self.rg(*row) {
                    let gr = slot(grads, *row, val(*row));
                    for r in 0..g.rows() {
                        for (o, &x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::MulRow(a, row) => {
                let rv = val(*row);
                if self.rg(*a) {
                    let ga = slot(grads, *a, g);
                    for r in 0..g.rows() {
                        for ((o, &x), &y) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(rv.data()) {
                            *o += x * y;
                        }
                    }
                }
                if self.rg(*row) {
                    let av = val(*a);
                    let gr = slot(grads, *row, rv);
                    for r in 0..g.rows() {
                        for ((o, &x), &y) in gr.data_mut().iter_mut().zip(g.row(r)).zip(av.row(r)) {
                            *o += x * y;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                let ga = slot(grads, *a, g);
                for (o, &x) in ga.data_mut().iter_mut().zip(g.data()) {
                    *o += x * *s;
                }
            }
            Op::AddScalar(a) => slot(grads, *a, g).add_assign(g),
            Op::Silu(a) => {
                let av = val(*a);
                let ga = slot(grads, *a, g);
                for ((o, &x), &d) in ga.data_mut().iter_mut().zip(av.data()).zip(g.data()) {
                    let s = T::one() / (T::one() + (-x).exp());
                    *o += d * s * (T::one() + x * (T::one() - s));
                }
            }
            Op::Gelu(a) => {
                let av = val(*a);
                let ga = slot(grads, *a, g);
                for ((o, &x), &d) in ga.data_mut().iter_mut().zip(av.data()).zip(g.data()) {
                    *o += d * gelu_grad(x);
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let ga = slot(grads, *a, g);
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((o, &p), &q) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o += p * (q - dot);
                    }
                }
            }
            Op::LayerNorm { a, rstd } => {
                let y = &node.value;
                let n = lit::<T>(y.cols() as f64);
                let ga = slot(grads, *a, g);
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let mean_g = gr.iter().copied().sum::<T>() / n;
                    let mean_gy = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum::<T>() / n;
                    for ((o, &p), &q) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o += rstd[r] * (q - mean_g - p * mean_gy);
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                let ga = slot(grads, *a, val(*a));
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &x) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = val(p);
                    let n = pv.len();
                    if self.rg(p) {
                        let gp = slot(grads, p, pv);
                        for (o, &x) in gp.data_mut().iter_mut().zip(&g.data()[off..off + n]) {
                            *o += x;
                        }
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = val(p);
                    let w = pv.cols();
                    if self.rg(p) {
                        let gp = slot(grads, p, pv);
                        for r in 0..g.rows() {
                            for (o, &x) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *o += x;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows { a, start } => {
                let cols = g.cols();
                let ga = slot(grads, *a, val(*a));
                let dst = &mut ga.data_mut()[start * cols..start * cols + g.len()];
                for (o, &x) in dst.iter_mut().zip(g.data()) {
                    *o += x;
                }
            }
            Op::SliceCols { a, start } => {
                let ga = slot(grads, *a, val(*a));
                for r in 0..g.rows() {
                    for (o, &x) in ga.row_mut(r)[*start..*start + g.cols()].iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
            Op::MeanRows(a) => {
                let av = val(*a);
                let inv = T::one() / lit::<T>(av.rows() as f64);
                let ga = slot(grads, *a, av);
                for r in 0..av.rows() {
                    for (o, &x) in ga.row_mut(r).iter_mut().zip(g.data()) {
                        *o += x * inv;
                    }
                }
            }
            Op::MaskRows { a, keep } => {
                let ga = slot(grads, *a, g);
                for (r, &k) in keep.iter().enumerate() {
                    if k {
                        for (o, &x) in ga.row_mut(r).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::AssembleMean { parts, counts } => {
                for (v, idx) in parts {
                    if !self.rg(*v) {
                        continue;
                    }
                    let gp = slot(grads, *v, val(*v));
                    for (r, &cell) in idx.iter().enumerate() {
                        let inv = T::one() / lit::<T>(counts[cell] as f64);
                        for (o, &x) in gp.row_mut(r).iter_mut().zip(g.row(cell)) {
                            *o += x * inv;
                        }
                    }
                }
            }
            Op::Mse { a, target } => {
                let av = val(*a);
                let scale = g.get(0, 0) * lit::<T>(2.0) / lit::<T>(av.len() as f64);
                let ga = slot(grads, *a, av);
                for ((o, &x), &y) in ga.data_mut().iter_mut().zip(av.data()).zip(target.data()) {
                    *o += (x - y) * scale;
                }
            }
        }
    }
}

fn slot<'a, T: Real>(grads: &'a mut [Option<Matrix<T>>], v: Var, like: &Matrix<T>) -> &'a mut Matrix<T> {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(like.rows(), like.cols()))
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.params.get(&id).and_then(|&v| self.of(v))
    }

    /// Parameters that received a gradient.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Matrix<T>)> + '_ {
        self.params.iter().filter_map(|(&id, &v)| self.of(v).map(|g| (id, g)))
    }
}

fn gelu_fwd<T: Real>(x: T) -> T {
    let c = lit::<T>((2.0 / std::f64::consts::PI).sqrt());
    let k = lit::<T>(0.044715);
    let half = lit::<T>(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = lit::<T>((2.0 / std::f64::consts::PI).sqrt());
    let k = lit::<T>(0.044715);
    let half = lit::<T>(0.5);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let du = c * (T::one() + lit::<T>(3.0) * k * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Lexicographic total order on rows.
fn cmp_rows<T: Real>(a: &[T], b: &[T]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        let o = x.to_f64_lossy().total_cmp(&y.to_f64_lossy());
        if o != Ordering::Equal {
            return o;
        }
    }
    Ordering::Equal
}

/// Pairwise-tree sum of equally sized rows into `out` (overwrites).
pub(crate) fn pairwise_sum<T: Real>(rows: &[&[T]], out: &mut [T]) {
    match rows.len() {
        0 => out.iter_mut().for_each(|o| *o = T::zero()),
        1 => out.copy_from_slice(rows[0]),
        n => {
            let mid = n.div_ceil(2);
            let mut right = vec![T::zero(); out.len()];
            pairwise_sum(&rows[..mid], out);
            pairwise_sum(&rows[mid..], &mut right);
            for (o, r) in out.iter_mut().zip(right) {
                *o += r;
            }
        }
    }
}
