//! Reverse-mode differentiation over a recorded computation graph.
//!
//! A [`Graph`] borrows the parameter store, records every operation applied
//! to its [`Var`]s together with the forward value, and is dropped after one
//! training step. [`Graph::backward`] walks the record in reverse and returns
//! one gradient tensor per parameter; parameters the loss does not depend on
//! get zeros.
//!
//! All values are rank-2 matrices. Shape violations are programming errors
//! inside the network code and panic with the offending shapes.

use std::collections::HashMap;

use super::{gemm, softmax_in_place, MatRef, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learnable arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid("parameter", format!("duplicate name {name}")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// One gradient array per parameter, aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros(store: &ParamStore) -> Self {
        Self {
            tensors: store.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_scaled(b, 1.0);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    RowScale(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    LogFloor(Var, f64),
    SoftmaxRows(Var),
    Transpose(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var, Vec<Vec<usize>>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MaxOf(Vec<Var>, Vec<u8>),
    RowMax(Var, Vec<usize>),
    Pick(Var, Vec<(usize, usize)>),
    Sum(Var),
    Contract { a: Var, y: Var, width: usize },
    GroupDot { q: Var, k: Var },
    GroupMix { w: Var, v: Var },
    PairSum { outer: Var, inner: Var },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Tensor>,
    needs_grad: bool,
}

/// Recording context for one forward/backward pass.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.store.get(*id),
            (_, Some(t)) => t,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        debug_assert!(value.is_finite() || cfg!(not(debug_assertions)));
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value: Some(t),
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (ar, ac) = dims(av);
        let (br, bc) = dims(bv);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul: {:?}{} x {:?}{}", av.shape(), if ta { "^T" } else { "" }, bv.shape(), if tb { "^T" } else { "" });
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(av.data(), ar, ac, ta),
            MatRef::new(bv.data(), br, bc, tb),
            0.0,
            &mut out,
        );
        self.push(Op::MatMul { a, b, ta, tb }, Tensor::matrix(m, n, out), &[a, b])
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, name: &str) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "{name}: shapes differ");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::matrix(av.rows(), av.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x + y, "add");
        self.push(Op::Add(a, b), t, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x - y, "sub");
        self.push(Op::Sub(a, b), t, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x * y, "mul");
        self.push(Op::Mul(a, b), t, &[a, b])
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.len(), av.cols(), "add_row: {:?} + {:?}", av.shape(), rv.shape());
        let mut t = av.clone();
        let n = av.cols();
        for r in 0..av.rows() {
            for (x, y) in t.data_mut()[r * n..(r + 1) * n].iter_mut().zip(rv.data()) {
                *x += y;
            }
        }
        self.push(Op::AddRow(a, row), t, &[a, row])
    }

    /// Scales row `i` of `a` by `s[i]`, with `s` an `m x 1` column.
    pub fn row_scale(&mut self, a: Var, s: Var) -> Var {
        let (av, sv) = (self.value(a), self.value(s));
        assert_eq!(sv.len(), av.rows(), "row_scale: {:?} by {:?}", av.shape(), sv.shape());
        let mut t = av.clone();
        let n = av.cols();
        for (r, &f) in sv.data().iter().enumerate() {
            t.data_mut()[r * n..(r + 1) * n].iter_mut().for_each(|x| *x *= f);
        }
        self.push(Op::RowScale(a, s), t, &[a, s])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), t, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), t, &[a])
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Var {
        let t = self.value(a).map(|x| x.max(floor).ln());
        self.push(Op::LogFloor(a, floor), t, &[a])
    }

    /// Row-wise softmax. Columns where `mask` is false receive exactly 0.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let mut t = self.value(a).clone();
        if let Some(m) = mask {
            assert_eq!(m.len(), t.cols(), "softmax mask length");
        }
        for r in 0..t.rows() {
            softmax_in_place(t.row_mut(r), mask);
        }
        self.push(Op::SoftmaxRows(a), t, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        self.push(Op::Transpose(a), t, &[a])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), rows * cols, "reshape {:?} -> {rows}x{cols}", av.shape());
        let t = Tensor::matrix(rows, cols, av.data().to_vec());
        self.push(Op::Reshape(a), t, &[a])
    }

    /// Row lookup; `idx` entries index rows of `a` (embedding lookup).
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let av = self.value(a);
        let n = av.cols();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            assert!(i < av.rows(), "gather_rows: row {i} of {}", av.rows());
            data.extend_from_slice(av.row(i));
        }
        let t = Tensor::matrix(idx.len(), n, data);
        self.push(Op::GatherRows(a, idx), t, &[a])
    }

    /// Output row `i` is the mean of the rows of `a` listed in `sets[i]`
    /// (zero for an empty set).
    pub fn mean_rows(&mut self, a: Var, sets: Vec<Vec<usize>>) -> Var {
        let av = self.value(a);
        let n = av.cols();
        let mut t = Tensor::zeros(&[sets.len(), n]);
        for (i, set) in sets.iter().enumerate() {
            if set.is_empty() {
                continue;
            }
            let w = 1.0 / set.len() as f64;
            let out = t.row_mut(i);
            for &r in set {
                for (o, x) in out.iter_mut().zip(av.row(r)) {
                    *o += w * x;
                }
            }
        }
        self.push(Op::MeanRows(a, sets), t, &[a])
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row counts");
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w].copy_from_slice(pv.row(r));
            }
            offset += w;
        }
        let t = Tensor::matrix(rows, total, data);
        let inputs = parts.clone();
        self.push(Op::ConcatCols(parts), t, &inputs)
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in &parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column counts");
            data.extend_from_slice(pv.data());
        }
        let rows = data.len() / cols.max(1);
        let t = Tensor::matrix(rows, cols, data);
        let inputs = parts.clone();
        self.push(Op::ConcatRows(parts), t, &inputs)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        let n = av.cols();
        assert!(start <= end && end <= av.rows(), "slice_rows {start}..{end}");
        let t = Tensor::matrix(end - start, n, av.data()[start * n..end * n].to_vec());
        self.push(Op::SliceRows(a, start), t, &[a])
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert!(start <= end && end <= av.cols(), "slice_cols {start}..{end}");
        let w = end - start;
        let mut data = Vec::with_capacity(av.rows() * w);
        for r in 0..av.rows() {
            data.extend_from_slice(&av.row(r)[start..end]);
        }
        let t = Tensor::matrix(av.rows(), w, data);
        self.push(Op::SliceCols(a, start), t, &[a])
    }

    /// Elementwise maximum over same-shaped inputs.
    pub fn max_of(&mut self, parts: Vec<Var>) -> Var {
        assert!(!parts.is_empty() && parts.len() < 256, "max_of arity");
        let first = self.value(parts[0]);
        let mut best = first.clone();
        let mut arg = vec![0u8; first.len()];
        for (k, &p) in parts.iter().enumerate().skip(1) {
            let pv = self.value(p);
            assert_eq!(pv.shape(), first.shape(), "max_of shapes");
            for ((b, a), &x) in best.data_mut().iter_mut().zip(arg.iter_mut()).zip(pv.data()) {
                if x > *b {
                    *b = x;
                    *a = k as u8;
                }
            }
        }
        let inputs = parts.clone();
        self.push(Op::MaxOf(parts, arg), best, &inputs)
    }

    /// Per-row maximum, giving an `m x 1` column.
    pub fn row_max(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut arg = Vec::with_capacity(av.rows());
        let mut data = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let (j, &m) = av
                .row(r)
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |acc, (j, x)| if *x > *acc.1 { (j, x) } else { acc });
            arg.push(j);
            data.push(m);
        }
        let t = Tensor::matrix(av.rows(), 1, data);
        self.push(Op::RowMax(a, arg), t, &[a])
    }

    /// Collects `a[r][c]` for each `(r, c)` into a `1 x n` row.
    pub fn pick(&mut self, a: Var, at: Vec<(usize, usize)>) -> Var {
        let av = self.value(a);
        let data = at.iter().map(|&(r, c)| av.get(r, c)).collect();
        let t = Tensor::matrix(1, at.len(), data);
        self.push(Op::Pick(a, at), t, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), t, &[a])
    }

    /// Pairwise bilinear contraction. `a` is `n x (width * d)`, holding for
    /// each row a `width x d` block; `y` is `l x d`. The result is
    /// `(n * l) x width` with `out[i * l + j][c] = sum_k a[i][c * d + k] * y[j][k]`.
    pub fn contract(&mut self, a: Var, y: Var, width: usize) -> Var {
        let (av, yv) = (self.value(a), self.value(y));
        let (n, l, d) = (av.rows(), yv.rows(), yv.cols());
        assert_eq!(av.cols(), width * d, "contract: {:?} vs y {:?}, width {width}", av.shape(), yv.shape());
        // big = y (l x d) * A'^T where A' is (n*width) x d
        let mut big = vec![0.0; l * n * width];
        gemm(
            MatRef::new(yv.data(), l, d, false),
            MatRef::new(av.data(), n * width, d, true),
            0.0,
            &mut big,
        );
        let mut out = vec![0.0; n * l * width];
        for j in 0..l {
            for i in 0..n {
                let src = &big[j * n * width + i * width..j * n * width + (i + 1) * width];
                out[(i * l + j) * width..(i * l + j + 1) * width].copy_from_slice(src);
            }
        }
        let t = Tensor::matrix(n * l, width, out);
        self.push(Op::Contract { a, y, width }, t, &[a, y])
    }

    /// `q` is `n x h`, `k` is `(n * l) x h`; output `n x l` holds
    /// `q[i] . k[i * l + j]`.
    pub fn group_dot(&mut self, q: Var, k: Var) -> Var {
        let (qv, kv) = (self.value(q), self.value(k));
        let (n, h) = dims(qv);
        assert_eq!(kv.cols(), h, "group_dot widths");
        assert_eq!(kv.rows() % n.max(1), 0, "group_dot rows");
        let l = if n == 0 { 0 } else { kv.rows() / n };
        let mut data = vec![0.0; n * l];
        for i in 0..n {
            let qi = qv.row(i);
            for j in 0..l {
                data[i * l + j] = qi.iter().zip(kv.row(i * l + j)).map(|(a, b)| a * b).sum();
            }
        }
        let t = Tensor::matrix(n, l, data);
        self.push(Op::GroupDot { q, k }, t, &[q, k])
    }

    /// `w` is `n x l`, `v` is `(n * l) x h`; output `n x h` holds
    /// `sum_j w[i][j] * v[i * l + j]`.
    pub fn group_mix(&mut self, w: Var, v: Var) -> Var {
        let (wv, vv) = (self.value(w), self.value(v));
        let (n, l) = dims(wv);
        assert_eq!(vv.rows(), n * l, "group_mix rows");
        let h = vv.cols();
        let mut data = vec![0.0; n * h];
        for i in 0..n {
            let out = &mut data[i * h..(i + 1) * h];
            for j in 0..l {
                let wij = wv.get(i, j);
                for (o, x) in out.iter_mut().zip(vv.row(i * l + j)) {
                    *o += wij * x;
                }
            }
        }
        let t = Tensor::matrix(n, h, data);
        self.push(Op::GroupMix { w, v }, t, &[w, v])
    }

    /// `outer` is `n x h`, `inner` is `l x h`; output `(n * l) x h` holds
    /// `outer[i] + inner[j]` at row `i * l + j`.
    pub fn pair_sum(&mut self, outer: Var, inner: Var) -> Var {
        let (ov, iv) = (self.value(outer), self.value(inner));
        let (n, h) = dims(ov);
        let l = iv.rows();
        assert_eq!(iv.cols(), h, "pair_sum widths");
        let mut data = vec![0.0; n * l * h];
        for i in 0..n {
            for j in 0..l {
                let dst = &mut data[(i * l + j) * h..(i * l + j + 1) * h];
                for ((d, a), b) in dst.iter_mut().zip(ov.row(i)).zip(iv.row(j)) {
                    *d = a + b;
                }
            }
        }
        let t = Tensor::matrix(n * l, h, data);
        self.push(Op::PairSum { outer, inner }, t, &[outer, inner])
    }

    /// Gradients of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::zeros(self.store);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, idx, g, &mut grads, &mut out);
        }
        out
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let shape = self.value(v).shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_scaled(&g, 1.0),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, idx: usize, g: Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) {
        let y = self.nodes[idx].value.as_ref();
        match op {
            Op::Constant => {}
            Op::Param(id) => out.tensors[id.0].add_scaled(&g, 1.0),
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ar, ac) = dims(av);
                let (br, bc) = dims(bv);
                let (m, n) = dims(&g);
                let gref = MatRef::new(g.data(), m, n, false);
                if let Some(da) = self.slot(grads, *a) {
                    if *ta {
                        // dA = op(B) * G^T
                        gemm(MatRef::new(bv.data(), br, bc, *tb), MatRef::new(g.data(), m, n, true), 1.0, da.data_mut());
                    } else {
                        // dA = G * op(B)^T
                        gemm(gref, MatRef::new(bv.data(), br, bc, !*tb), 1.0, da.data_mut());
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    if *tb {
                        // dB = G^T * op(A)
                        gemm(MatRef::new(g.data(), m, n, true), MatRef::new(av.data(), ar, ac, *ta), 1.0, db.data_mut());
                    } else {
                        // dB = op(A)^T * G
                        gemm(MatRef::new(av.data(), ar, ac, !*ta), gref, 1.0, db.data_mut());
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *b, g.clone());
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, g.map(|x| -x));
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = Tensor::matrix(g.rows(), g.cols(), g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect());
                let gb = Tensor::matrix(g.rows(), g.cols(), g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect());
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::AddRow(a, row) => {
                if let Some(dr) = self.slot(grads, *row) {
                    let n = g.cols();
                    for r in 0..g.rows() {
                        for (d, x) in dr.data_mut().iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                            *d += x;
                        }
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::RowScale(a, s) => {
                let (av, sv) = (self.value(*a), self.value(*s));
                let n = g.cols();
                if let Some(ds) = self.slot(grads, *s) {
                    for r in 0..g.rows() {
                        ds.data_mut()[r] += g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
                let mut ga = g;
                for (r, &f) in sv.data().iter().enumerate() {
                    ga.data_mut()[r * n..(r + 1) * n].iter_mut().for_each(|x| *x *= f);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|x| x * f)),
            Op::Tanh(a) => {
                let yv = y.expect("tanh value");
                let ga = Tensor::matrix(g.rows(), g.cols(), g.data().iter().zip(yv.data()).map(|(d, t)| d * (1.0 - t * t)).collect());
                self.accumulate(grads, *a, ga);
            }
            Op::LogFloor(a, floor) => {
                let av = self.value(*a);
                let ga = Tensor::matrix(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(av.data()).map(|(d, &x)| if x > *floor { d / x } else { 0.0 }).collect(),
                );
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let yv = y.expect("softmax value");
                let mut ga = g;
                for r in 0..yv.rows() {
                    let yr = yv.row(r);
                    let gr = ga.row_mut(r);
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(p, d)| p * d).sum();
                    for (d, p) in gr.iter_mut().zip(yr) {
                        *d = p * (*d - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Reshape(a) => {
                let (r, c) = dims(self.value(*a));
                self.accumulate(grads, *a, Tensor::matrix(r, c, g.into_data()));
            }
            Op::GatherRows(a, idx) => {
                if let Some(da) = self.slot(grads, *a) {
                    for (i, &r) in idx.iter().enumerate() {
                        for (d, x) in da.row_mut(r).iter_mut().zip(g.row(i)) {
                            *d += x;
                        }
                    }
                }
            }
            Op::MeanRows(a, sets) => {
                if let Some(da) = self.slot(grads, *a) {
                    for (i, set) in sets.iter().enumerate() {
                        if set.is_empty() {
                            continue;
                        }
                        let w = 1.0 / set.len() as f64;
                        for &r in set {
                            for (d, x) in da.row_mut(r).iter_mut().zip(g.row(i)) {
                                *d += w * x;
                            }
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(dp) = self.slot(grads, p) {
                        for r in 0..g.rows() {
                            for (d, x) in dp.row_mut(r).iter_mut().zip(&g.data()[r * total + offset..r * total + offset + w]) {
                                *d += x;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(dp) = self.slot(grads, p) {
                        for (d, x) in dp.data_mut().iter_mut().zip(&g.data()[offset..offset + len]) {
                            *d += x;
                        }
                    }
                    offset += len;
                }
            }
            Op::SliceRows(a, start) => {
                if let Some(da) = self.slot(grads, *a) {
                    let n = g.cols();
                    for (d, x) in da.data_mut()[start * n..].iter_mut().zip(g.data()) {
                        *d += x;
                    }
                }
            }
            Op::SliceCols(a, start) => {
                if let Some(da) = self.slot(grads, *a) {
                    for r in 0..g.rows() {
                        for (d, x) in da.row_mut(r)[*start..].iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                }
            }
            Op::MaxOf(parts, arg) => {
                for (k, &p) in parts.iter().enumerate() {
                    if let Some(dp) = self.slot(grads, p) {
                        for ((d, &x), &w) in dp.data_mut().iter_mut().zip(g.data()).zip(arg) {
                            if w as usize == k {
                                *d += x;
                            }
                        }
                    }
                }
            }
            Op::RowMax(a, arg) => {
                if let Some(da) = self.slot(grads, *a) {
                    for (r, &j) in arg.iter().enumerate() {
                        da.row_mut(r)[j] += g.data()[r];
                    }
                }
            }
            Op::Pick(a, at) => {
                if let Some(da) = self.slot(grads, *a) {
                    let n = da.cols();
                    for (&(r, c), x) in at.iter().zip(g.data()) {
                        da.data_mut()[r * n + c] += x;
                    }
                }
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.data()[0]));
            }
            Op::Contract { a, y: yvar, width } => {
                let (av, yv) = (self.value(*a), self.value(*yvar));
                let (n, l, d, w) = (av.rows(), yv.rows(), yv.cols(), *width);
                // dbig[j][i * w + c] = g[(i * l + j)][c]
                let mut dbig = vec![0.0; l * n * w];
                for i in 0..n {
                    for j in 0..l {
                        dbig[j * n * w + i * w..j * n * w + (i + 1) * w].copy_from_slice(&g.data()[(i * l + j) * w..(i * l + j + 1) * w]);
                    }
                }
                if let Some(dy) = self.slot(grads, *yvar) {
                    // dy = dbig (l x nw) * A' (nw x d)
                    gemm(MatRef::new(&dbig, l, n * w, false), MatRef::new(av.data(), n * w, d, false), 1.0, dy.data_mut());
                }
                if let Some(da) = self.slot(grads, *a) {
                    // dA' = dbig^T (nw x l) * y (l x d)
                    gemm(MatRef::new(&dbig, l, n * w, true), MatRef::new(yv.data(), l, d, false), 1.0, da.data_mut());
                }
            }
            Op::GroupDot { q, k } => {
                let (qv, kv) = (self.value(*q), self.value(*k));
                let (n, l) = dims(&g);
                if let Some(dq) = self.slot(grads, *q) {
                    for i in 0..n {
                        let dqi = dq.row_mut(i);
                        for j in 0..l {
                            let gij = g.get(i, j);
                            for (d, x) in dqi.iter_mut().zip(kv.row(i * l + j)) {
                                *d += gij * x;
                            }
                        }
                    }
                }
                if let Some(dk) = self.slot(grads, *k) {
                    for i in 0..n {
                        for j in 0..l {
                            let gij = g.get(i, j);
                            for (d, x) in dk.row_mut(i * l + j).iter_mut().zip(qv.row(i)) {
                                *d += gij * x;
                            }
                        }
                    }
                }
            }
            Op::GroupMix { w, v } => {
                let (wv, vv) = (self.value(*w), self.value(*v));
                let (n, l) = dims(wv);
                if let Some(dw) = self.slot(grads, *w) {
                    for i in 0..n {
                        for j in 0..l {
                            let s: f64 = g.row(i).iter().zip(vv.row(i * l + j)).map(|(a, b)| a * b).sum();
                            dw.data_mut()[i * l + j] += s;
                        }
                    }
                }
                if let Some(dv) = self.slot(grads, *v) {
                    for i in 0..n {
                        for j in 0..l {
                            let wij = wv.get(i, j);
                            for (d, x) in dv.row_mut(i * l + j).iter_mut().zip(g.row(i)) {
                                *d += wij * x;
                            }
                        }
                    }
                }
            }
            Op::PairSum { outer, inner } => {
                let n = self.value(*outer).rows();
                let l = self.value(*inner).rows();
                if let Some(d_outer) = self.slot(grads, *outer) {
                    for i in 0..n {
                        for j in 0..l {
                            for (d, x) in d_outer.row_mut(i).iter_mut().zip(g.row(i * l + j)) {
                                *d += x;
                            }
                        }
                    }
                }
                if let Some(d_inner) = self.slot(grads, *inner) {
                    for i in 0..n {
                        for j in 0..l {
                            for (d, x) in d_inner.row_mut(j).iter_mut().zip(g.row(i * l + j)) {
                                *d += x;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` with central
/// differences of width `step`, returning for every parameter group
/// `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
pub fn gradient_check(store: &mut ParamStore, step: f64, f: impl Fn(&mut Graph<'_>) -> Var) -> Vec<(String, f64)> {
    let grads = {
        let mut g = Graph::new(store);
        let loss = f(&mut g);
        g.backward(loss)
    };
    let eval = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let loss = f(&mut g);
        g.value(loss).data()[0]
    };
    let ids: Vec<ParamId> = store.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let mut numeric = vec![0.0; store.get(id).len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + step;
            let up = eval(store);
            store.get_mut(id).data_mut()[k] = orig - step;
            let down = eval(store);
            store.get_mut(id).data_mut()[k] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        let analytic = grads.get(id).data();
        let norm = |xs: &[f64]| xs.iter().map(|a| a * a).sum::<f64>().sqrt();
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = norm(analytic).max(norm(&numeric));
        let err = if scale == 0.0 { 0.0 } else { diff / scale };
        out.push((store.name(id).to_string(), err));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn random(rng: &mut Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.normal()).collect())
    }

    /// Max relative error between the tape gradient and central differences
    /// of `f` for every parameter in `store`.
    fn check(store: &mut ParamStore, f: impl Fn(&mut Graph<'_>) -> Var) -> f64 {
        gradient_check(store, 1e-5, f).into_iter().map(|(_, e)| e).fold(0.0, f64::max)
    }

    #[test]
    fn sum_gives_all_ones() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0])).unwrap();
        let mut g = Graph::new(&store);
        let v = g.param(p);
        let loss = g.sum(v);
        let grads = g.backward(loss);
        assert!(grads.get(p).data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn half_sum_of_squares_gives_identity() {
        let mut store = ParamStore::new();
        let vals = vec![1.5, -2.0, 0.25];
        let p = store.add("p", Tensor::matrix(1, 3, vals.clone())).unwrap();
        let mut g = Graph::new(&store);
        let v = g.param(p);
        let sq = g.mul(v, v);
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        let grads = g.backward(loss);
        assert_eq!(grads.get(p).data(), vals.as_slice());
    }

    #[test]
    fn disconnected_parameter_gets_zero_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::scalar(2.0)).unwrap();
        let q = store.add("q", Tensor::scalar(3.0)).unwrap();
        let mut g = Graph::new(&store);
        let v = g.param(p);
        let loss = g.sum(v);
        let grads = g.backward(loss);
        assert_eq!(grads.get(q).data(), &[0.0]);
    }

    #[test]
    fn matmul_variants_match_finite_differences() {
        let mut rng = Rng::new(5);
        let mut store = ParamStore::new();
        let a = store.add("a", random(&mut rng, 3, 4)).unwrap();
        let b = store.add("b", random(&mut rng, 5, 4)).unwrap();
        let c = store.add("c", random(&mut rng, 3, 5)).unwrap();
        let err = check(&mut store, |g| {
            let (av, bv, cv) = (g.param(a), g.param(b), g.param(c));
            let ab = g.matmul_t(av, false, bv, true); // 3x5
            let x = g.mul(ab, cv);
            let cta = g.matmul_t(cv, true, av, false); // 5x4
            let btc = g.matmul_t(bv, true, cv, true); // 4x3
            let y = g.matmul(cta, btc); // 5x3
            let t = g.tanh(y);
            let s1 = g.sum(x);
            let s2 = g.sum(t);
            g.add(s1, s2)
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = Rng::new(8);
        let mut store = ParamStore::new();
        let x = store.add("x", random(&mut rng, 4, 3)).unwrap();
        let row = store.add("row", random(&mut rng, 1, 3)).unwrap();
        let s = store.add("s", random(&mut rng, 4, 1)).unwrap();
        let err = check(&mut store, |g| {
            let (xv, rv, sv) = (g.param(x), g.param(row), g.param(s));
            let a = g.add_row(xv, rv);
            let b = g.row_scale(a, sv);
            let gathered = g.gather_rows(b, vec![3, 0, 0, 2]);
            let pooled = g.mean_rows(gathered, vec![vec![0, 1], vec![2], vec![0, 1, 3], vec![]]);
            let cat = g.concat_cols(vec![pooled, xv]);
            let stacked = g.concat_rows(vec![cat, cat]);
            let sl = g.slice_rows(stacked, 2, 7);
            let sc = g.slice_cols(sl, 1, 5);
            let tr = g.transpose(sc);
            let rs = g.reshape(tr, 5, 4);
            let sm = g.softmax_rows(rs, Some(&[true, false, true, true]));
            let picked = g.pick(sm, vec![(0, 0), (1, 2), (4, 3), (2, 1)]);
            let lg = g.log_floor(picked, 1e-12);
            let mx = g.max_of(vec![xv, gathered]);
            let rm = g.row_max(mx);
            let t1 = g.sum(lg);
            let t2 = g.sum(rm);
            let d = g.sub(t1, t2);
            g.scale(d, 0.7)
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn grouped_ops_match_finite_differences() {
        let mut rng = Rng::new(21);
        let (n, l, h, d) = (2, 3, 2, 4);
        let mut store = ParamStore::new();
        let e = store.add("e", random(&mut rng, n, d)).unwrap();
        let u = store.add("u", random(&mut rng, d, h * d)).unwrap();
        let y = store.add("y", random(&mut rng, l, d)).unwrap();
        let q = store.add("q", random(&mut rng, n, h)).unwrap();
        let p = store.add("p", random(&mut rng, l, h)).unwrap();
        let err = check(&mut store, |g| {
            let (ev, uv, yv, qv, pv) = (g.param(e), g.param(u), g.param(y), g.param(q), g.param(p));
            let a = g.matmul(ev, uv);
            let bil = g.contract(a, yv, h);
            let ps = g.pair_sum(qv, pv);
            let k = g.add(bil, ps);
            let scores = g.group_dot(qv, k);
            let w = g.softmax_rows(scores, None);
            let mixed = g.group_mix(w, k);
            let t = g.tanh(mixed);
            g.sum(t)
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn contract_matches_explicit_bilinear_form() {
        let mut rng = Rng::new(2);
        let (n, l, h, d) = (3, 4, 2, 5);
        let mut store = ParamStore::new();
        let e = store.add("e", random(&mut rng, n, d)).unwrap();
        let u = store.add("u", random(&mut rng, d, h * d)).unwrap();
        let y = store.add("y", random(&mut rng, l, d)).unwrap();
        let mut g = Graph::new(&store);
        let (ev, uv, yv) = (g.param(e), g.param(u), g.param(y));
        let a = g.matmul(ev, uv);
        let out = g.contract(a, yv, h);
        let (et, ut, yt) = (store.get(e), store.get(u), store.get(y));
        for i in 0..n {
            for j in 0..l {
                for c in 0..h {
                    let mut s = 0.0;
                    for p in 0..d {
                        for q in 0..d {
                            s += et.get(i, p) * ut.get(p, c * d + q) * yt.get(j, q);
                        }
                    }
                    assert!((g.value(out).get(i * l + j, c) - s).abs() < 1e-12);
                }
            }
        }
    }
}
