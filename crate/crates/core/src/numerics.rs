//! Minimal dense linear algebra in row-major storage.
//!
//! Only what the attention/merge/spectral code needs: vectors, small dense
//! matrices, a numerically stable softmax, a one-sided Jacobi SVD and the
//! rank-one projection used by the closed-form merge.

use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use crate::{Error, Result, Scalar};

/// Norms at or below this are treated as zero directions.
pub const DEGENERACY_EPS: f64 = 1e-12;

/// Default cap on Jacobi sweeps before the SVD reports non-convergence.
pub const SVD_MAX_SWEEPS: usize = 80;

#[derive(Clone, Debug, PartialEq)]
pub struct Vector<T>(Vec<T>);

impl<T: Scalar> Vector<T> {
    /// Validating constructor: non-empty, all elements finite.
    pub fn new(data: Vec<T>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptySequence);
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self(data))
    }

    /// Wraps data without validation. Callers guarantee the invariants.
    pub(crate) fn from_vec_unchecked(data: Vec<T>) -> Self {
        debug_assert!(!data.is_empty());
        Self(data)
    }

    pub fn from_f64(data: &[f64]) -> Result<Self> {
        Self::new(data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "vector length must be positive");
        Self(vec![T::zero(); len])
    }

    pub fn from_fn(len: usize, f: impl FnMut(usize) -> T) -> Self {
        assert!(len > 0, "vector length must be positive");
        Self((0..len).map(f).collect())
    }

    /// Unit vector along coordinate `axis`.
    pub fn basis(len: usize, axis: usize) -> Self {
        let mut v = Self::zeros(len);
        v.0[axis] = T::one();
        v
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.0.iter()
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    fn check_len(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                found: other.len(),
            });
        }
        Ok(())
    }

    #[inline]
    pub fn dot(&self, other: &Self) -> T {
        debug_assert_eq!(self.len(), other.len());
        self.0
            .iter()
            .zip(&other.0)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
    }

    pub fn checked_dot(&self, other: &Self) -> Result<T> {
        self.check_len(other)?;
        Ok(self.dot(other))
    }

    #[inline]
    pub fn norm_sq(&self) -> T {
        self.dot(self)
    }

    #[inline]
    pub fn norm(&self) -> T {
        self.norm_sq().sqrt()
    }

    pub fn scale(&self, s: T) -> Self {
        Self(self.0.iter().map(|&x| x * s).collect())
    }

    /// `self + s * other`
    pub fn axpy(&self, s: T, other: &Self) -> Self {
        debug_assert_eq!(self.len(), other.len());
        Self(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(&a, &b)| a + s * b)
                .collect(),
        )
    }

    pub fn checked_add(&self, other: &Self) -> Result<Self> {
        self.check_len(other)?;
        Ok(self + other)
    }

    pub fn checked_sub(&self, other: &Self) -> Result<Self> {
        self.check_len(other)?;
        Ok(self - other)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.0
            .iter()
            .zip(&other.0)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn max_element(&self) -> T {
        self.0.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn sum(&self) -> T {
        self.0.iter().copied().sum()
    }
}

impl<T> Index<usize> for Vector<T> {
    type Output = T;
    #[inline]
    fn index(&self, i: usize) -> &T {
        &self.0[i]
    }
}

impl<T> IndexMut<usize> for Vector<T> {
    #[inline]
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.0[i]
    }
}

impl<T: Scalar> Add for &Vector<T> {
    type Output = Vector<T>;
    fn add(self, rhs: &Vector<T>) -> Vector<T> {
        assert_eq!(self.len(), rhs.len(), "vector length mismatch");
        Vector(self.0.iter().zip(&rhs.0).map(|(&a, &b)| a + b).collect())
    }
}

impl<T: Scalar> Sub for &Vector<T> {
    type Output = Vector<T>;
    fn sub(self, rhs: &Vector<T>) -> Vector<T> {
        assert_eq!(self.len(), rhs.len(), "vector length mismatch");
        Vector(self.0.iter().zip(&rhs.0).map(|(&a, &b)| a - b).collect())
    }
}

impl<T: Scalar> Neg for &Vector<T> {
    type Output = Vector<T>;
    fn neg(self) -> Vector<T> {
        Vector(self.0.iter().map(|&a| -a).collect())
    }
}

impl<T: Scalar> Mul<T> for &Vector<T> {
    type Output = Vector<T>;
    fn mul(self, s: T) -> Vector<T> {
        self.scale(s)
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptySequence);
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::new(rows, cols, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    /// Rectangular `rows x cols` matrix with `diag` on the leading diagonal.
    pub fn from_diag(rows: usize, cols: usize, diag: &[T]) -> Self {
        assert!(diag.len() <= rows.min(cols));
        let mut m = Self::zeros(rows, cols);
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[Vector<T>]) -> Result<Self> {
        let first = columns.first().ok_or(Error::EmptySequence)?;
        let rows = first.len();
        for c in columns {
            if c.len() != rows {
                return Err(Error::DimensionMismatch {
                    expected: rows,
                    found: c.len(),
                });
            }
        }
        Ok(Self::from_fn(rows, columns.len(), |i, j| columns[j][i]))
    }

    /// `a b^T`
    pub fn outer(a: &Vector<T>, b: &Vector<T>) -> Self {
        Self::from_fn(a.len(), b.len(), |i, j| a[i] * b[j])
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> Vector<T> {
        Vector(self.data[i * self.cols..(i + 1) * self.cols].to_vec())
    }

    pub fn column(&self, j: usize) -> Vector<T> {
        Vector((0..self.rows).map(|i| self[(i, j)]).collect())
    }

    /// Columns `[start, start + width)` as a new matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Result<Self> {
        if width == 0 || start + width > self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                found: start + width,
            });
        }
        Ok(Self::from_fn(self.rows, width, |i, j| self[(i, start + j)]))
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                found: other.rows,
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `A x` for a column vector `x`.
    pub fn matvec(&self, x: &Vector<T>) -> Result<Vector<T>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                found: x.len(),
            });
        }
        Ok(Vector(
            (0..self.rows)
                .map(|i| {
                    self.data[i * self.cols..(i + 1) * self.cols]
                        .iter()
                        .zip(x.as_slice())
                        .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
                })
                .collect(),
        ))
    }

    /// `x A` for a row vector `x`: the projection `y = x W` used for Q/K/V.
    pub fn vecmat(&self, x: &Vector<T>) -> Result<Vector<T>> {
        if x.len() != self.rows {
            return Err(Error::DimensionMismatch {
                expected: self.rows,
                found: x.len(),
            });
        }
        let mut out = vec![T::zero(); self.cols];
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        Ok(Vector(out))
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x * s).collect(),
        }
    }

    pub fn checked_add(&self, other: &Self) -> Result<Self> {
        self.check_shape(other)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        })
    }

    pub fn checked_sub(&self, other: &Self) -> Result<Self> {
        self.check_shape(other)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect(),
        })
    }

    fn check_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                expected: self.rows * self.cols,
                found: other.rows * other.cols,
            });
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Softmax with max-subtraction.
pub fn softmax<T: Scalar>(logits: &Vector<T>) -> Vector<T> {
    let max = logits.max_element();
    let exps: Vec<T> = logits.iter().map(|&e| (e - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Vector(exps.into_iter().map(|e| e / total).collect())
}

/// Thin singular value decomposition `m = u * diag(sigma) * vt`.
///
/// For an `r x c` input with `p = min(r, c)`: `u` is `r x p` with orthonormal
/// columns, `sigma` has `p` non-negative entries sorted descending, `vt` is
/// `p x c` with orthonormal rows.
#[derive(Clone, Debug)]
pub struct Svd<T> {
    pub u: Matrix<T>,
    pub sigma: Vector<T>,
    pub vt: Matrix<T>,
}

impl<T: Scalar> Svd<T> {
    pub fn reconstruct(&self) -> Matrix<T> {
        let p = self.sigma.len();
        let us = Matrix::from_fn(self.u.rows(), p, |i, j| self.u[(i, j)] * self.sigma[j]);
        us.matmul(&self.vt).expect("svd factors are conformable")
    }
}

pub fn svd<T: Scalar>(m: &Matrix<T>) -> Result<Svd<T>> {
    svd_with_cap(m, SVD_MAX_SWEEPS)
}

/// One-sided (Hestenes) Jacobi SVD with an explicit sweep cap.
pub fn svd_with_cap<T: Scalar>(m: &Matrix<T>, max_sweeps: usize) -> Result<Svd<T>> {
    if m.as_slice().iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    if m.rows() >= m.cols() {
        jacobi_tall(m, max_sweeps)
    } else {
        // A^T = U' S V'^T  =>  A = V' S U'^T
        let t = jacobi_tall(&m.transpose(), max_sweeps)?;
        Ok(Svd {
            u: t.vt.transpose(),
            sigma: t.sigma,
            vt: t.u.transpose(),
        })
    }
}

fn jacobi_tall<T: Scalar>(m: &Matrix<T>, max_sweeps: usize) -> Result<Svd<T>> {
    let (rows, cols) = m.shape();
    // Column-major working copies.
    let mut a: Vec<Vec<T>> = (0..cols).map(|j| m.column(j).into_inner()).collect();
    let mut v: Vec<Vec<T>> = (0..cols)
        .map(|j| Vector::<T>::basis(cols, j).into_inner())
        .collect();
    let tol = T::epsilon() * T::lit(rows as f64);

    let mut converged = cols < 2;
    for _ in 0..max_sweeps {
        if converged {
            break;
        }
        let mut rotated = false;
        for i in 0..cols - 1 {
            for j in i + 1..cols {
                let (alpha, beta, gamma) = {
                    let (ci, cj) = (&a[i], &a[j]);
                    let mut alpha = T::zero();
                    let mut beta = T::zero();
                    let mut gamma = T::zero();
                    for (&x, &y) in ci.iter().zip(cj) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if gamma == T::zero() || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut a, i, j, c, s);
                rotate_pair(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::ConvergenceFailure { sweeps: max_sweeps });
    }

    let norms: Vec<T> = a
        .iter()
        .map(|c| c.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt())
        .collect();
    let mut order: Vec<usize> = (0..cols).collect();
    // Stable: ties keep factorization order.
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).expect("finite norms"));

    let sigma_max = norms[order[0]];
    let cutoff = sigma_max * T::epsilon() * T::lit(rows.max(cols) as f64);
    let mut u_cols: Vec<Option<Vector<T>>> = order
        .iter()
        .map(|&k| {
            let n = norms[k];
            if n > cutoff && n > T::zero() {
                Some(Vector(a[k].iter().map(|&x| x / n).collect()))
            } else {
                None
            }
        })
        .collect();
    complete_orthonormal(&mut u_cols, rows);
    let u_cols: Vec<Vector<T>> = u_cols.into_iter().map(|c| c.expect("completed")).collect();

    let u = Matrix::from_columns(&u_cols)?;
    let sigma = Vector(order.iter().map(|&k| norms[k]).collect());
    let vt = Matrix::from_fn(cols, cols, |i, j| v[order[i]][j]);
    Ok(Svd { u, sigma, vt })
}

fn rotate_pair<T: Scalar>(cols: &mut [Vec<T>], i: usize, j: usize, c: T, s: T) {
    let (lo, hi) = cols.split_at_mut(j);
    let (ci, cj) = (&mut lo[i], &mut hi[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// Fills the `None` slots with unit vectors orthogonal to every other column,
/// drawing candidates from the standard basis.
fn complete_orthonormal<T: Scalar>(cols: &mut [Option<Vector<T>>], dim: usize) {
    let mut axis = 0;
    for slot in 0..cols.len() {
        if cols[slot].is_some() {
            continue;
        }
        while axis < dim {
            let mut cand = Vector::<T>::basis(dim, axis);
            axis += 1;
            // Two passes of modified Gram-Schmidt.
            for _ in 0..2 {
                for other in cols.iter().flatten() {
                    let p = cand.dot(other);
                    cand = cand.axpy(-p, other);
                }
            }
            let n = cand.norm();
            if n > T::lit(0.5) {
                cols[slot] = Some(cand.scale(T::one() / n));
                break;
            }
        }
    }
}

/// Orthonormalizes the columns of `m` (modified Gram-Schmidt, re-orthogonalized).
pub fn orthonormalize_columns<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out: Vec<Vector<T>> = Vec::with_capacity(m.cols());
    for j in 0..m.cols() {
        let mut c = m.column(j);
        for _ in 0..2 {
            for prev in &out {
                let p = c.dot(prev);
                c = c.axpy(-p, prev);
            }
        }
        let n = c.norm();
        if n <= T::lit(DEGENERACY_EPS) {
            return Err(Error::DegenerateDirection);
        }
        out.push(c.scale(T::one() / n));
    }
    Matrix::from_columns(&out)
}

/// Orthogonal projection of `b` onto `span{q}`: `(q.b / q.q) q`.
pub fn project_onto<T: Scalar>(q: &Vector<T>, b: &Vector<T>) -> Result<Vector<T>> {
    q.check_len(b)?;
    let qq = q.norm_sq();
    if qq.sqrt() <= T::lit(DEGENERACY_EPS) {
        return Err(Error::DegenerateDirection);
    }
    Ok(q.scale(q.dot(b) / qq))
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine<T: Scalar>(a: &Vector<T>, b: &Vector<T>) -> Result<T> {
    a.check_len(b)?;
    let (na, nb) = (a.norm(), b.norm());
    let eps = T::lit(DEGENERACY_EPS);
    if na <= eps || nb <= eps {
        return Err(Error::DegenerateDirection);
    }
    Ok((a.dot(b) / (na * nb)).max(-T::one()).min(T::one()))
}
