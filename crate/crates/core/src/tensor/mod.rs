//! Dense row-major `f64` arrays, a seeded random source and a small
//! reverse-mode differentiation tape for the operations the denoiser uses.

mod graph;
mod rng;

pub use graph::{gradient_check, Gradients, Graph, ParamId, ParamStore, Var};
pub use rng::{Rng, RngState};

use crate::error::{Error, Result};

/// A dense array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Builds a `rows x cols` matrix; panics if `data` has the wrong length.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix({rows}, {cols})");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Ok(Self::matrix(rows.len(), cols, rows.concat()))
    }

    pub fn scalar(value: f64) -> Self {
        Self::matrix(1, 1, vec![value])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    /// Leading extent of a matrix (1 for vectors and scalars).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Trailing extent; `data.len() / rows()` for higher ranks.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.data.len() / self.shape[0].max(1),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += scale * other`; shapes must hold the same number of values.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        assert_eq!(self.data.len(), other.data.len(), "add_scaled length");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("rank-2 operands required, got {:?} and {:?}", self.shape, other.shape),
            ));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: {:?} x {:?}", self.shape, other.shape),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(&self.data, m, k, false),
            MatRef::new(&other.data, k, n, false),
            0.0,
            &mut out,
        );
        Ok(Tensor::matrix(m, n, out))
    }

    /// Max-stabilised softmax along `axis` of a rank-2 tensor.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if self.shape.len() != 2 || axis > 1 {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} invalid for shape {:?}", self.shape),
            ));
        }
        if axis == 1 {
            let mut out = self.clone();
            for r in 0..self.rows() {
                softmax_in_place(out.row_mut(r), None);
            }
            Ok(out)
        } else {
            Ok(self.transpose().softmax(1)?.transpose())
        }
    }
}

/// Softmax of `xs` in place; positions where `mask` is false get exactly 0.
pub(crate) fn softmax_in_place(xs: &mut [f64], mask: Option<&[bool]>) {
    let valid = |i: usize| mask.map_or(true, |m| m[i]);
    let max = xs
        .iter()
        .enumerate()
        .filter(|&(i, _)| valid(i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (i, x) in xs.iter_mut().enumerate() {
        if valid(i) {
            *x = (*x - max).exp();
            total += *x;
        } else {
            *x = 0.0;
        }
    }
    if total > 0.0 {
        for x in xs.iter_mut() {
            *x /= total;
        }
    }
}

/// Read-only view of a row-major matrix, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    trans: bool,
}

impl<'a> MatRef<'a> {
    /// `rows x cols` is the stored layout; `trans` reads it as its transpose.
    pub(crate) fn new(data: &'a [f64], rows: usize, cols: usize, trans: bool) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            trans,
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = beta * out + a * b` with `out` dense row-major.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, out: &mut [f64]) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm inner extents");
    assert_eq!(out.len(), m * n, "gemm output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            out.iter_mut().for_each(|v| *v = 0.0);
        } else {
            out.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the views are bounds-checked above against their logical
    // extents and strides derived from the stored layout.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn identity_times_matrix() {
        let m = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(Tensor::identity(3).matmul(&m).unwrap(), m);
    }

    #[test]
    fn scalar_product() {
        let out = Tensor::scalar(2.0).matmul(&Tensor::scalar(3.0)).unwrap();
        assert_eq!(out.data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(11);
        let a = Tensor::matrix(4, 5, (0..20).map(|_| rng.normal()).collect());
        let b = Tensor::matrix(5, 2, (0..10).map(|_| rng.normal()).collect());
        let fast = a.matmul(&b).unwrap();
        let slow = triple_loop(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_mismatched_inner() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn transposed_views_match_explicit_transpose() {
        let mut rng = Rng::new(3);
        let a = Tensor::matrix(3, 4, (0..12).map(|_| rng.normal()).collect());
        let b = Tensor::matrix(5, 4, (0..20).map(|_| rng.normal()).collect());
        let mut out = vec![0.0; 15];
        gemm(
            MatRef::new(a.data(), 3, 4, false),
            MatRef::new(b.data(), 5, 4, true),
            0.0,
            &mut out,
        );
        let reference = triple_loop(&a, &b.transpose());
        for (x, y) in out.iter().zip(reference.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_symmetric_pair() {
        let t = Tensor::matrix(1, 2, vec![0.0, 0.0]);
        assert_eq!(t.softmax(1).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_shift_invariant() {
        let a = Tensor::matrix(1, 2, vec![0.3, 1.7]).softmax(1).unwrap();
        let b = Tensor::matrix(1, 2, vec![100.3, 101.7]).softmax(1).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn softmax_one_two_three() {
        // 40-digit evaluation of exp(i) / (e + e^2 + e^3) for i = 1, 2, 3.
        let expected = [
            0.090_030_573_170_380_457_998,
            0.244_728_471_054_797_652_47,
            0.665_240_955_774_821_889_53,
        ];
        let out = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).softmax(1).unwrap();
        for (x, y) in out.data().iter().zip(expected) {
            assert!((x - y).abs() < 1e-15, "{x} vs {y}");
        }
    }

    #[test]
    fn softmax_axis_zero_and_invalid_axis() {
        let t = Tensor::matrix(2, 2, vec![1.0, 5.0, 1.0, -5.0]);
        let cols = t.softmax(0).unwrap();
        assert!((cols.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((cols.get(0, 1) + cols.get(1, 1) - 1.0).abs() < 1e-15);
        assert!(t.softmax(2).is_err());
    }

    #[test]
    fn masked_softmax_zeroes_padding() {
        let mut xs = [3.0, -1.0, 7.0];
        softmax_in_place(&mut xs, Some(&[true, true, false]));
        assert_eq!(xs[2], 0.0);
        assert!((xs[0] + xs[1] - 1.0).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(
                vals in proptest::collection::vec(-50.0f64..50.0, 1..40),
            ) {
                let n = vals.len();
                let out = Tensor::matrix(1, n, vals).softmax(1).unwrap();
                prop_assert!((out.sum() - 1.0).abs() < 1e-12);
                prop_assert!(out.data().iter().all(|&p| p >= 0.0));
            }
        }
    }
}
