//! Dense row-major matrices and the handful of kernels the adapter needs.
//!
//! Storage and the production forward/backward run in `f32`
//! ([`EmbeddingMatrix`]); everything is generic over [`Real`] so that the
//! gradient checker can replay a computation in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};
use crate::par;

/// Floating-point element type used throughout the crate.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal fits the element type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Row norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Clone, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// The universal numeric carrier: embeddings as `f32` rows.
pub type EmbeddingMatrix = Matrix<f32>;

impl<T: Debug> Debug for Matrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Matrix[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list().entries(self.data.chunks(self.cols.max(1))).finish()?;
        }
        Ok(())
    }
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims(
                "Matrix::from_vec",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dims(
                    "Matrix::from_rows",
                    format!("{cols} columns"),
                    format!("{} in row {i}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Builds a matrix by evaluating `f(row, col)` for every entry.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: T) {
        self.data[i * self.cols + j] = value;
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Matrix<T>, s: T) -> Result<()> {
        self.check_same_shape(other, "Matrix::add_scaled")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + s * b;
        }
        Ok(())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix<T>) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::dims(
                "matmul",
                format!("rhs with {} rows", self.cols),
                rhs.rows,
            ));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        let inner = self.cols;
        par::for_each_row_mut(&mut out.data, rhs.cols, |i, orow| {
            let arow = &self.data[i * inner..(i + 1) * inner];
            for (k, &a) in arow.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in orow.iter_mut().zip(rhs.row(k)) {
                    *o = *o + a * b;
                }
            }
        });
        Ok(out)
    }

    /// `selfᵀ · rhs`.
    pub fn t_matmul(&self, rhs: &Matrix<T>) -> Result<Self> {
        if self.rows != rhs.rows {
            return Err(Error::dims(
                "t_matmul",
                format!("rhs with {} rows", self.rows),
                rhs.rows,
            ));
        }
        let mut out = Self::zeros(self.cols, rhs.cols);
        par::for_each_row_mut(&mut out.data, rhs.cols, |k, orow| {
            for i in 0..self.rows {
                let a = self.get(i, k);
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in orow.iter_mut().zip(rhs.row(i)) {
                    *o = *o + a * b;
                }
            }
        });
        Ok(out)
    }

    /// `self · rhsᵀ`.
    pub fn matmul_t(&self, rhs: &Matrix<T>) -> Result<Self> {
        if self.cols != rhs.cols {
            return Err(Error::dims(
                "matmul_t",
                format!("rhs with {} columns", self.cols),
                rhs.cols,
            ));
        }
        let mut out = Self::zeros(self.rows, rhs.rows);
        par::for_each_row_mut(&mut out.data, rhs.rows, |i, orow| {
            let arow = self.row(i);
            for (o, brow) in orow.iter_mut().zip(rhs.iter_rows()) {
                *o = dot(arow, brow);
            }
        });
        Ok(out)
    }

    pub fn row_norms(&self) -> Vec<T> {
        self.iter_rows().map(norm).collect()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix<T>) -> T {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn ensure_finite(self, what: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(what))
        }
    }

    pub(crate) fn check_same_shape(&self, other: &Matrix<T>, context: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dims(
                context,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Scales every row to unit Euclidean length.
pub fn row_l2_normalize<T: Real>(m: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if n.as_f64() < ZERO_NORM || !n.is_finite() {
            return Err(Error::ZeroRow {
                row: i,
                norm: n.as_f64(),
            });
        }
        for x in out.row_mut(i) {
            *x = *x / n;
        }
    }
    Ok(out)
}

/// Pairwise cosine similarities, entries clamped to `[-1, 1]`.
pub fn cosine_sim_matrix<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols() != b.cols() {
        return Err(Error::dims("cosine_sim_matrix", a.cols(), b.cols()));
    }
    let an = row_l2_normalize(a)?;
    let bn = row_l2_normalize(b)?;
    Ok(an.matmul_t(&bn)?.map(|x| x.max(-T::one()).min(T::one())))
}

/// The message-passing nonlinearity: elementwise `max(0, x)`.
pub fn activation<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    m.map(relu)
}

#[inline]
pub(crate) fn relu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    if !max.is_finite() {
        return max;
    }
    let sum: T = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

pub fn softmax<T: Real>(xs: &[T]) -> Vec<T> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|&x| (x - lse).exp()).collect()
}

/// Central-difference gradient of a scalar function of a matrix.
pub fn finite_diff_grad<T, F>(mut f: F, at: &Matrix<T>, eps: T) -> Result<Matrix<T>>
where
    T: Real,
    F: FnMut(&Matrix<T>) -> T,
{
    let mut probe = at.clone();
    let mut grad = Matrix::zeros(at.rows(), at.cols());
    let two = T::lit(2.0);
    for idx in 0..at.data.len() {
        let orig = probe.data[idx];
        probe.data[idx] = orig + eps;
        let hi = f(&probe);
        probe.data[idx] = orig - eps;
        let lo = f(&probe);
        probe.data[idx] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NonFinite("finite_diff_grad probe"));
        }
        grad.data[idx] = (hi - lo) / (two * eps);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f32]]) -> Matrix<f32> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let n = row_l2_normalize(&m(&[&[3.0, 4.0]])).unwrap();
        assert!((n.get(0, 0) - 0.6).abs() < 1e-7 && (n.get(0, 1) - 0.8).abs() < 1e-7);
        let n = row_l2_normalize(&m(&[&[1.0, 0.0], &[0.0, 2.0]])).unwrap();
        assert_eq!(n, Matrix::identity(2));
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let err = row_l2_normalize(&m(&[&[1.0, 0.0], &[0.0, 0.0]])).unwrap_err();
        assert!(matches!(err, Error::ZeroRow { row: 1, .. }));
    }

    #[test]
    fn cosine_examples() {
        let e1 = m(&[&[1.0, 0.0]]);
        assert_eq!(cosine_sim_matrix(&e1, &e1).unwrap().get(0, 0), 1.0);
        assert_eq!(cosine_sim_matrix(&e1, &m(&[&[0.0, 1.0]])).unwrap().get(0, 0), 0.0);
        assert_eq!(cosine_sim_matrix(&e1, &m(&[&[-1.0, 0.0]])).unwrap().get(0, 0), -1.0);
        assert!(matches!(
            cosine_sim_matrix(&e1, &m(&[&[1.0, 0.0, 0.0]])),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn activation_examples() {
        assert_eq!(activation(&m(&[&[-1.0, 2.0]])), m(&[&[0.0, 2.0]]));
        assert_eq!(activation(&Matrix::<f32>::zeros(2, 3)), Matrix::zeros(2, 3));
        assert_eq!(activation(&m(&[&[0.5]])), m(&[&[0.5]]));
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(
            |x: &Matrix<f64>| x.as_slice().iter().map(|v| v * v).sum(),
            &Matrix::from_vec(1, 1, vec![3.0]).unwrap(),
            1e-4,
        )
        .unwrap();
        assert!((g.get(0, 0) - 6.0).abs() < 1e-8);

        let g = finite_diff_grad(|_: &Matrix<f64>| 2.5, &Matrix::zeros(2, 2), 1e-4).unwrap();
        assert_eq!(g, Matrix::zeros(2, 2));

        let err = finite_diff_grad(|_: &Matrix<f64>| f64::NAN, &Matrix::zeros(1, 1), 1e-4);
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Matrix::<f64>::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.5 - 2.0);
        let b = Matrix::<f64>::from_fn(4, 2, |i, j| (i + 2 * j) as f64 - 1.5);
        let ab = a.matmul(&b).unwrap();
        let naive = Matrix::from_fn(3, 2, |i, j| (0..4).map(|k| a.get(i, k) * b.get(k, j)).sum());
        assert_eq!(ab, naive);
        assert_eq!(a.transpose().t_matmul(&b).unwrap(), naive);
        assert_eq!(a.matmul_t(&b.transpose()).unwrap(), naive);
    }

    #[test]
    fn lse_is_stable() {
        let big = [1000.0f32, 1000.0];
        assert!((log_sum_exp(&big) - (1000.0 + 2f32.ln())).abs() < 1e-3);
        let p = softmax(&[1.0f64, 2.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn matrix_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Matrix<f32>> {
        prop::collection::vec(-10.0f32..10.0, rows * cols)
            .prop_filter("rows must be nonzero", move |v| {
                v.chunks(cols).all(|r| norm(r) > 1e-3)
            })
            .prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
    }

    proptest! {
        #[test]
        fn normalized_rows_are_unit(m in matrix_strategy(8, 16)) {
            let n = row_l2_normalize(&m).unwrap();
            for r in n.row_norms() {
                prop_assert!((r - 1.0).abs() < 1e-6);
            }
            let again = row_l2_normalize(&n).unwrap();
            prop_assert!(again.max_abs_diff(&n) < 1e-6);
        }

        #[test]
        fn cosine_unit_diagonal_and_bounded(m in matrix_strategy(5, 7)) {
            let c = cosine_sim_matrix(&m, &m).unwrap();
            for i in 0..5 {
                prop_assert!((c.get(i, i) - 1.0).abs() < 1e-5);
            }
            prop_assert!(c.as_slice().iter().all(|x| (-1.0..=1.0).contains(x)));
        }

        #[test]
        fn cosine_scale_invariant(
            a in matrix_strategy(4, 6),
            b in matrix_strategy(3, 6),
            scales in prop::collection::vec(0.01f32..100.0, 4),
        ) {
            let scaled = Matrix::from_fn(4, 6, |i, j| a.get(i, j) * scales[i]);
            let c0 = cosine_sim_matrix(&a, &b).unwrap();
            let c1 = cosine_sim_matrix(&scaled, &b).unwrap();
            prop_assert!(c0.max_abs_diff(&c1) < 1e-5);
        }

        #[test]
        fn activation_idempotent(v in prop::collection::vec(-5.0f32..5.0, 12)) {
            let m = Matrix::from_vec(3, 4, v).unwrap();
            let once = activation(&m);
            prop_assert_eq!(activation(&once), once);
        }
    }
}
