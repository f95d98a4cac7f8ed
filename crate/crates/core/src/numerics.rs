//! Dense row-major matrices and the handful of kernels the losses and
//! encoders are built from.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Rows below this norm cannot be normalized.
pub const MIN_ROW_NORM: f64 = 1e-30;

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// Work (multiply-adds) above which `matmul_t` splits output rows across threads.
const PAR_THRESHOLD: usize = 1 << 16;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                rows * cols,
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_f64_rows(rows: &[&[f64]]) -> Self {
        let converted: Vec<Vec<T>> = rows
            .iter()
            .map(|r| r.iter().map(|&v| T::of(v)).collect())
            .collect();
        Self::from_rows(&converted)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    /// Entries drawn uniformly from `[-bound, bound)`.
    pub fn random_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| T::of(rng.random_range(-bound..bound)))
            .collect();
        Self { rows, cols, data }
    }

    /// Standard normal entries.
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                T::of(v)
            })
            .collect();
        Self { rows, cols, data }
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

    pub fn row_iter(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact panics on a zero chunk size
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other, "zip_map")?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Self, s: T) -> Result<()> {
        self.check_same_shape(other, "add_scaled")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + s * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    /// Sum over rows, one entry per column.
    pub fn column_sums(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for r in self.row_iter() {
            for (o, &v) in out.iter_mut().zip(r) {
                *o = *o + v;
            }
        }
        out
    }

    pub fn row_norms(&self) -> Vec<T> {
        self.row_iter().map(|r| dot(r, r).sqrt()).collect()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64(&self) -> Matrix<f64> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.widen()).collect(),
        }
    }

    pub fn check_same_shape(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                context,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Sequential left-to-right dot product.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `a · bᵀ`: entry `(i, j)` is the dot product of row `i` of `a` with row `j` of `b`.
///
/// Output rows may be computed on several threads, but every entry is one
/// sequential dot product, so results are bit-identical to a single thread.
pub fn matmul_t<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(Error::shape("matmul_t", a.cols, b.cols));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    if b.rows == 0 {
        return Ok(out);
    }
    let fill = |(i, out_row): (usize, &mut [T])| {
        let ar = a.row(i);
        for (j, o) in out_row.iter_mut().enumerate() {
            *o = dot(ar, b.row(j));
        }
    };
    if a.rows * b.rows * a.cols >= PAR_THRESHOLD {
        out.data.par_chunks_mut(b.rows).enumerate().for_each(fill);
    } else {
        out.data.chunks_mut(b.rows).enumerate().for_each(fill);
    }
    Ok(out)
}

/// Ordinary product `a · b`.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.cols, b.rows));
    }
    matmul_t(a, &b.transpose())
}

/// `aᵀ · b`.
pub fn t_matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return Err(Error::shape("t_matmul", a.rows, b.rows));
    }
    matmul_t(&a.transpose(), &b.transpose())
}

/// Scales each row to unit Euclidean norm.
pub fn l2_normalize_rows<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = m.clone();
    for i in 0..m.rows {
        let norm = dot(m.row(i), m.row(i)).sqrt();
        if !(norm.widen() >= MIN_ROW_NORM) {
            return Err(Error::ZeroRow { row: i });
        }
        for v in out.row_mut(i) {
            *v = *v / norm;
        }
    }
    Ok(out)
}

/// Pulls a gradient on `y = x / ‖x‖` (row-wise) back to `x`.
///
/// `normalized` is the forward output `y` and `norms` the per-row `‖x‖`.
pub fn l2_normalize_rows_backward<T: Scalar>(
    normalized: &Matrix<T>,
    norms: &[T],
    upstream: &Matrix<T>,
) -> Result<Matrix<T>> {
    normalized.check_same_shape(upstream, "l2_normalize_rows_backward")?;
    let mut out = upstream.clone();
    for i in 0..normalized.rows {
        let y = normalized.row(i);
        let proj = dot(y, upstream.row(i));
        for (o, &yv) in out.row_mut(i).iter_mut().zip(y) {
            *o = (*o - yv * proj) / norms[i];
        }
    }
    Ok(out)
}

fn check_tau<T: Scalar>(tau: T) -> Result<()> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(Error::BadTemperature(tau.widen()));
    }
    Ok(())
}

/// Row-wise softmax of `m / tau` with per-row max subtraction.
pub fn row_softmax<T: Scalar>(m: &Matrix<T>, tau: T) -> Result<Matrix<T>> {
    check_tau(tau)?;
    let mut out = m.clone();
    for i in 0..m.rows {
        let row = out.row_mut(i);
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = ((*v - max) / tau).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(out)
}

/// Row-wise log-softmax of `m / tau`, computed via log-sum-exp.
pub fn log_row_softmax<T: Scalar>(m: &Matrix<T>, tau: T) -> Result<Matrix<T>> {
    check_tau(tau)?;
    let mut out = m.clone();
    for i in 0..m.rows {
        let row = out.row_mut(i);
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let total = row
            .iter()
            .fold(T::zero(), |acc, &v| acc + ((v - max) / tau).exp());
        let lse = total.ln();
        for v in row.iter_mut() {
            *v = (*v - max) / tau - lse;
        }
    }
    Ok(out)
}

/// Outcome of comparing an analytic gradient against finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    /// Worst coordinate-wise relative error.
    pub max_rel_err: f64,
    pub worst_coordinate: (usize, usize),
    /// `‖a - n‖ / max(‖a‖, ‖n‖, floor)` over the whole gradient.
    pub norm_rel_err: f64,
}

impl GradCheckReport {
    /// Coordinate-wise check.
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err <= rel_tol
    }

    /// Whole-gradient check; less sensitive to the O(h²) truncation error of
    /// individual high-curvature coordinates.
    pub fn passes_norm(&self, rel_tol: f64) -> bool {
        self.norm_rel_err <= rel_tol
    }
}

/// Central-difference gradient of a scalar function of a matrix.
pub fn finite_diff_grad<T, F>(f: F, at: &Matrix<T>, h: T) -> Result<Matrix<T>>
where
    T: Scalar,
    F: Fn(&Matrix<T>) -> Result<T>,
{
    if !(h > T::zero()) {
        return Err(Error::BadStep(h.widen()));
    }
    let two_h = h + h;
    let mut probe = at.clone();
    let mut grad = Matrix::zeros(at.rows, at.cols);
    for k in 0..at.data.len() {
        let orig = probe.data[k];
        probe.data[k] = orig + h;
        let up = f(&probe)?;
        probe.data[k] = orig - h;
        let down = f(&probe)?;
        probe.data[k] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteValue("finite_diff_grad"));
        }
        grad.data[k] = (up - down) / two_h;
    }
    Ok(grad)
}

/// Compares two gradients coordinate-wise and as whole vectors.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`; the floor keeps
/// coordinates whose true derivative is ~0 from dominating through
/// round-off in the difference quotient.
pub fn compare_grads<T: Scalar>(
    analytic: &Matrix<T>,
    numeric: &Matrix<T>,
    floor: f64,
) -> Result<GradCheckReport> {
    analytic.check_same_shape(numeric, "compare_grads")?;
    let mut report = GradCheckReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst_coordinate: (0, 0),
        norm_rel_err: 0.0,
    };
    let (mut sq_diff, mut sq_a, mut sq_n) = (0.0, 0.0, 0.0);
    for i in 0..analytic.rows {
        for j in 0..analytic.cols {
            let a = analytic[(i, j)].widen();
            let n = numeric[(i, j)].widen();
            let abs = (a - n).abs();
            sq_diff += abs * abs;
            sq_a += a * a;
            sq_n += n * n;
            let rel = abs / a.abs().max(n.abs()).max(floor);
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_coordinate = (i, j);
            }
        }
    }
    let scale: f64 = sq_a.sqrt().max(sq_n.sqrt()).max(floor);
    report.norm_rel_err = sq_diff.sqrt() / scale;
    Ok(report)
}
