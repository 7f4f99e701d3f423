//! Symmetric sparse coefficient matrices and their envelope Cholesky factors.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Symmetric sparse matrix in compressed sparse row form.
///
/// Both triangles are stored. Construction symmetrizes the input as
/// `(A + A^T) / 2`, so the stored matrix is exactly symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymMatrix<T: Scalar> {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> SparseSymMatrix<T> {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, T)]) -> Result<Self> {
        let half = T::lit(0.5);
        let mut rows: Vec<BTreeMap<usize, T>> = vec![BTreeMap::new(); n];
        for &(i, j, v) in triplets {
            if i >= n || j >= n {
                return Err(Error::Dimension(format!("entry ({i}, {j}) outside {n}x{n} matrix")));
            }
            if !v.is_finite_value() {
                return Err(Error::NonFinite("sparse matrix entry"));
            }
            *rows[i].entry(j).or_insert(T::zero()) += v * half;
            *rows[j].entry(i).or_insert(T::zero()) += v * half;
        }
        Ok(Self::from_rows(n, rows))
    }

    fn from_rows(n: usize, rows: Vec<BTreeMap<usize, T>>) -> Self {
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in rows {
            for (j, v) in row {
                col_idx.push(j);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Self { n, row_ptr, col_idx, values }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![T::one(); n])
    }

    pub fn diagonal(d: &[T]) -> Self {
        let n = d.len();
        Self {
            n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: d.to_vec(),
        }
    }

    /// Symmetric tridiagonal matrix; `off[i]` couples rows `i` and `i + 1`.
    pub fn tridiagonal(diag: &[T], off: &[T]) -> Result<Self> {
        let n = diag.len();
        if off.len() + 1 != n.max(1) {
            return Err(Error::Dimension(format!(
                "tridiagonal with {n} diagonal entries needs {} off-diagonal entries",
                n.saturating_sub(1)
            )));
        }
        let mut t = Vec::with_capacity(3 * n);
        for (i, &d) in diag.iter().enumerate() {
            t.push((i, i, d));
        }
        for (i, &o) in off.iter().enumerate() {
            t.push((i, i + 1, o));
            t.push((i + 1, i, o));
        }
        Self::from_triplets(n, &t)
    }

    /// Converts a dense matrix, dropping exact zeros.
    pub fn from_dense(m: &DMatrix<T>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Dimension("sparse symmetric matrix must be square".into()));
        }
        let mut t = Vec::new();
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                if m[(i, j)] != T::zero() {
                    t.push((i, j, m[(i, j)]));
                }
            }
        }
        Self::from_triplets(m.nrows(), &t)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col_idx[s..e].iter().copied().zip(self.values[s..e].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        match self.col_idx[s..e].binary_search(&j) {
            Ok(p) => self.values[s + p],
            Err(_) => T::zero(),
        }
    }

    /// Lower-triangle triplets (including the diagonal).
    pub fn lower_triplets(&self) -> Vec<(usize, usize, T)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                if j <= i {
                    out.push((i, j, v));
                }
            }
        }
        out
    }

    pub fn is_identity(&self) -> bool {
        (0..self.n).all(|i| {
            let mut it = self.row(i).filter(|&(_, v)| v != T::zero());
            matches!(it.next(), Some((j, v)) if j == i && v == T::one()) && it.next().is_none()
        })
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        let mut d = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                d[(i, j)] = v;
            }
        }
        d
    }

    pub fn mul_vec(&self, x: &[T], y: &mut [T]) {
        for i in 0..self.n {
            let mut acc = T::zero();
            for (j, v) in self.row(i) {
                acc += v * x[j];
            }
            y[i] = acc;
        }
    }

    /// `A * X` for a dense `X` with `n` rows.
    pub fn mul_dense(&self, x: &DMatrix<T>) -> DMatrix<T> {
        assert_eq!(x.nrows(), self.n, "sparse product dimension mismatch");
        let mut y = DMatrix::zeros(self.n, x.ncols());
        for c in 0..x.ncols() {
            let xc = x.column(c);
            let mut yc = y.column_mut(c);
            for i in 0..self.n {
                let mut acc = T::zero();
                for (j, v) in self.row(i) {
                    acc += v * xc[j];
                }
                yc[i] = acc;
            }
        }
        y
    }

    /// Gershgorin interval containing the spectrum.
    pub fn gershgorin(&self) -> (T, T) {
        let mut lo = T::max_value().unwrap_or(T::one());
        let mut hi = -lo;
        if self.n == 0 {
            return (T::zero(), T::zero());
        }
        for i in 0..self.n {
            let mut d = T::zero();
            let mut radius = T::zero();
            for (j, v) in self.row(i) {
                if j == i {
                    d = v;
                } else {
                    radius += v.abs();
                }
            }
            lo = lo.min(d - radius);
            hi = hi.max(d + radius);
        }
        (lo, hi)
    }

    /// `||A||_2` upper bound (Gershgorin).
    pub fn norm_bound(&self) -> T {
        let (lo, hi) = self.gershgorin();
        lo.abs().max(hi.abs())
    }

    pub fn scaled(&self, s: T) -> Self {
        let mut out = self.clone();
        for v in &mut out.values {
            *v *= s;
        }
        out
    }

    /// Structural and numerical equality.
    pub fn same_as(&self, other: &Self) -> bool {
        self == other
    }
}

/// Cholesky factor of a sparse SPD matrix stored over the matrix envelope.
///
/// Row `i` of `L` is kept densely from its first nonzero column to the
/// diagonal. Fill stays inside the envelope, so banded matrices (grid
/// Laplacians in natural ordering) factor in `O(n b^2)`.
#[derive(Debug, Clone)]
pub struct EnvelopeCholesky<T: Scalar> {
    n: usize,
    first: Vec<usize>,
    start: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> EnvelopeCholesky<T> {
    /// Factors `A + shift * I`.
    pub fn new(a: &SparseSymMatrix<T>, shift: T) -> Result<Self> {
        let n = a.dim();
        let mut first = Vec::with_capacity(n);
        let mut start = Vec::with_capacity(n + 1);
        start.push(0);
        for i in 0..n {
            let f = a.row(i).map(|(j, _)| j).filter(|&j| j <= i).min().unwrap_or(i);
            first.push(f);
            start.push(start[i] + (i - f + 1));
        }
        let mut data = vec![T::zero(); start[n]];
        for i in 0..n {
            for (j, v) in a.row(i) {
                if j <= i {
                    data[start[i] + j - first[i]] = v;
                }
            }
            data[start[i] + i - first[i]] += shift;
        }
        for i in 0..n {
            let fi = first[i];
            let ri = start[i];
            for j in fi..i {
                let fj = first[j];
                let rj = start[j];
                let k0 = fi.max(fj);
                let mut s = data[ri + j - fi];
                for k in k0..j {
                    s -= data[ri + k - fi] * data[rj + k - fj];
                }
                data[ri + j - fi] = s / data[rj + j - fj];
            }
            let mut d = data[ri + i - fi];
            for k in fi..i {
                let l = data[ri + k - fi];
                d -= l * l;
            }
            if d <= T::zero() || !d.is_finite_value() {
                return Err(Error::NotSpd(format!(
                    "nonpositive pivot {:e} at row {i} (shift {:e})",
                    d.to_f64_lossy(),
                    shift.to_f64_lossy()
                )));
            }
            data[ri + i - fi] = d.sqrt();
        }
        Ok(Self { n, first, start, data })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Stored entries of `L`.
    pub fn envelope_size(&self) -> usize {
        self.data.len()
    }

    pub fn solve_in_place(&self, x: &mut [T]) {
        let n = self.n;
        for i in 0..n {
            let fi = self.first[i];
            let ri = self.start[i];
            let mut s = x[i];
            for k in fi..i {
                s -= self.data[ri + k - fi] * x[k];
            }
            x[i] = s / self.data[ri + i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let ri = self.start[i];
            let xi = x[i] / self.data[ri + i - fi];
            x[i] = xi;
            for k in fi..i {
                x[k] -= self.data[ri + k - fi] * xi;
            }
        }
    }

    pub fn solve_vec(&self, b: &DVector<T>) -> DVector<T> {
        let mut x = b.clone();
        self.solve_in_place(x.as_mut_slice());
        x
    }

    pub fn solve_dense(&self, b: &DMatrix<T>) -> DMatrix<T> {
        let mut x = b.clone();
        for c in 0..x.ncols() {
            let mut col = x.column_mut(c);
            self.solve_in_place(col.as_mut_slice());
        }
        x
    }
}
