//! Dense kernels on small and tall-skinny matrices.
//!
//! The tall QR is a blocked Householder factorization (compact WY form) so
//! that almost all of its work runs through nalgebra's matrix products.
//! Everything else here operates on matrices whose dimensions are bounded by
//! the rank caps.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const QR_BLOCK: usize = 32;
const CHOL_BLOCK: usize = 64;

/// Thin QR factorization `a = q * r`.
///
/// For an `m x n` input, `q` is `m x min(m, n)` with orthonormal columns and
/// `r` is `min(m, n) x n` upper trapezoidal. Rank-deficient inputs are
/// accepted; the deficiency shows up as tiny diagonal entries of `r`.
pub fn thin_qr<T: Scalar>(a: &DMatrix<T>) -> (DMatrix<T>, DMatrix<T>) {
    let f = householder_qr(a);
    (f.q(), f.r)
}

/// Householder QR kept in compact WY form, so `Q` can be applied to a few
/// columns without ever being formed.
#[derive(Debug, Clone)]
pub struct HouseholderQr<T: Scalar> {
    m: usize,
    k: usize,
    blocks: Vec<(usize, DMatrix<T>, DMatrix<T>)>,
    r: DMatrix<T>,
}

impl<T: Scalar> HouseholderQr<T> {
    pub fn r(&self) -> &DMatrix<T> {
        &self.r
    }

    /// `Q c` for a `min(m, n) x p` matrix `c`.
    pub fn apply_q(&self, c: &DMatrix<T>) -> DMatrix<T> {
        assert_eq!(c.nrows(), self.k, "apply_q: row count must equal the number of reflectors");
        let p = c.ncols();
        let mut q = DMatrix::zeros(self.m, p);
        q.view_mut((0, 0), (self.k, p)).copy_from(c);
        for (j0, v, t) in self.blocks.iter().rev() {
            let rows = self.m - j0;
            let w = {
                let qs = q.view((*j0, 0), (rows, p));
                t * (v.transpose() * qs)
            };
            let mut qs = q.view_mut((*j0, 0), (rows, p));
            qs.gemm(-T::one(), v, &w, T::one());
        }
        q
    }

    /// Orthonormal basis of the complement of `range(Q)`, `m x (m - k)`.
    pub fn complement(&self) -> DMatrix<T> {
        let p = self.m - self.k;
        let mut q = DMatrix::zeros(self.m, p);
        for i in 0..p {
            q[(self.k + i, i)] = T::one();
        }
        for (j0, v, t) in self.blocks.iter().rev() {
            let rows = self.m - j0;
            let w = {
                let qs = q.view((*j0, 0), (rows, p));
                t * (v.transpose() * qs)
            };
            let mut qs = q.view_mut((*j0, 0), (rows, p));
            qs.gemm(-T::one(), v, &w, T::one());
        }
        q
    }

    /// Explicit thin `Q`.
    pub fn q(&self) -> DMatrix<T> {
        let mut q = DMatrix::zeros(self.m, self.k);
        for i in 0..self.k {
            q[(i, i)] = T::one();
        }
        for (j0, v, t) in self.blocks.iter().rev() {
            let rows = self.m - j0;
            let cols = self.k - j0;
            let w = {
                let qs = q.view((*j0, *j0), (rows, cols));
                t * (v.transpose() * qs)
            };
            let mut qs = q.view_mut((*j0, *j0), (rows, cols));
            qs.gemm(-T::one(), v, &w, T::one());
        }
        q
    }
}

pub fn householder_qr<T: Scalar>(a: &DMatrix<T>) -> HouseholderQr<T> {
    let (m, n) = a.shape();
    let k = m.min(n);
    if k == 0 {
        return HouseholderQr { m, k, blocks: Vec::new(), r: DMatrix::zeros(0, n) };
    }
    let mut work = a.clone();
    let mut taus = vec![T::zero(); k];
    let mut blocks: Vec<(usize, DMatrix<T>, DMatrix<T>)> = Vec::new();

    let mut j0 = 0;
    while j0 < k {
        let jb = QR_BLOCK.min(k - j0);
        for j in j0..j0 + jb {
            taus[j] = householder_in_place(&mut work, j);
            for c in j + 1..j0 + jb {
                apply_reflector(&mut work, j, taus[j], c);
            }
        }
        let v = reflector_block(&work, j0, jb);
        let t = triangular_factor(&v, &taus[j0..j0 + jb]);
        if j0 + jb < n {
            let rows = m - j0;
            let cols = n - j0 - jb;
            let w = {
                let a2 = work.view((j0, j0 + jb), (rows, cols));
                t.transpose() * (v.transpose() * a2)
            };
            let mut a2 = work.view_mut((j0, j0 + jb), (rows, cols));
            a2.gemm(-T::one(), &v, &w, T::one());
        }
        blocks.push((j0, v, t));
        j0 += jb;
    }

    let mut r = DMatrix::zeros(k, n);
    for j in 0..n {
        for i in 0..=j.min(k - 1) {
            r[(i, j)] = work[(i, j)];
        }
    }
    HouseholderQr { m, k, blocks, r }
}

/// Orthonormal basis of the column space (no rank detection).
pub fn orthonormal_columns<T: Scalar>(a: &DMatrix<T>) -> DMatrix<T> {
    thin_qr(a).0
}

// Householder vector for column `j`, rows `j..m`. Overwrites the diagonal with
// beta and the subdiagonal with the reflector tail (implicit leading one).
fn householder_in_place<T: Scalar>(a: &mut DMatrix<T>, j: usize) -> T {
    let m = a.nrows();
    let alpha = a[(j, j)];
    let mut xnorm2 = T::zero();
    for i in j + 1..m {
        xnorm2 += a[(i, j)] * a[(i, j)];
    }
    if xnorm2 == T::zero() {
        return T::zero();
    }
    let norm = (alpha * alpha + xnorm2).sqrt();
    let beta = if alpha >= T::zero() { -norm } else { norm };
    let tau = (beta - alpha) / beta;
    let scale = T::one() / (alpha - beta);
    for i in j + 1..m {
        a[(i, j)] *= scale;
    }
    a[(j, j)] = beta;
    tau
}

fn apply_reflector<T: Scalar>(a: &mut DMatrix<T>, j: usize, tau: T, c: usize) {
    if tau == T::zero() {
        return;
    }
    let m = a.nrows();
    let mut w = a[(j, c)];
    for i in j + 1..m {
        w += a[(i, j)] * a[(i, c)];
    }
    w *= tau;
    a[(j, c)] -= w;
    for i in j + 1..m {
        let vij = a[(i, j)];
        a[(i, c)] -= w * vij;
    }
}

fn reflector_block<T: Scalar>(work: &DMatrix<T>, j0: usize, jb: usize) -> DMatrix<T> {
    let rows = work.nrows() - j0;
    let mut v = DMatrix::zeros(rows, jb);
    for c in 0..jb {
        v[(c, c)] = T::one();
        for r in c + 1..rows {
            v[(r, c)] = work[(j0 + r, j0 + c)];
        }
    }
    v
}

// Upper triangular T with H_1 ... H_jb = I - V T V^T.
fn triangular_factor<T: Scalar>(v: &DMatrix<T>, taus: &[T]) -> DMatrix<T> {
    let jb = taus.len();
    let mut t = DMatrix::zeros(jb, jb);
    let vtv = v.transpose() * v;
    for i in 0..jb {
        t[(i, i)] = taus[i];
        if i == 0 {
            continue;
        }
        for r in 0..i {
            let mut acc = T::zero();
            for c in r..i {
                acc += t[(r, c)] * vtv[(c, i)];
            }
            t[(r, i)] = -taus[i] * acc;
        }
    }
    t
}

/// Singular value decomposition with singular values sorted non-increasingly.
#[derive(Debug, Clone)]
pub struct SortedSvd<T: Scalar> {
    pub u: DMatrix<T>,
    pub singular_values: Vec<T>,
    pub v: DMatrix<T>,
}

pub fn sorted_svd<T: Scalar>(m: &DMatrix<T>) -> SortedSvd<T> {
    let (nr, nc) = m.shape();
    if nr.min(nc) == 0 {
        return SortedSvd {
            u: DMatrix::zeros(nr, 0),
            singular_values: Vec::new(),
            v: DMatrix::zeros(nc, 0),
        };
    }
    if nr < nc {
        let t = sorted_svd(&m.transpose());
        return SortedSvd { u: t.v, singular_values: t.singular_values, v: t.u };
    }
    if nr > 2 * nc {
        // Tall input: Jacobi on the triangular factor.
        let (q, r) = thin_qr(m);
        let inner = jacobi_svd(r);
        return SortedSvd { u: q * inner.u, singular_values: inner.singular_values, v: inner.v };
    }
    jacobi_svd(m.clone())
}

/// One-sided (Hestenes) Jacobi SVD of an `m x n` matrix with `m >= n`.
///
/// Columns are rotated pairwise until mutually orthogonal to working
/// precision; singular values come out with high relative accuracy.
fn jacobi_svd<T: Scalar>(mut a: DMatrix<T>) -> SortedSvd<T> {
    let (m, n) = a.shape();
    let mut v = if n >= WARM_START_MIN {
        // Rotating by the eigenvectors of a^T a leaves only small off-diagonal
        // mass, so the sweeps below converge in a few passes.
        let v0 = symmetric_eigen(&(a.transpose() * &a)).1;
        a = &a * &v0;
        v0
    } else {
        DMatrix::<T>::identity(n, n)
    };
    let tol = T::lit(T::EPS) * <T as Scalar>::from_usize(m).sqrt();
    let mut sq: Vec<T> = vec![T::zero(); n];
    // Columns below this squared norm are rounding noise of the input; they
    // are never rotated against each other or against the rest.
    let floor = T::lit(T::EPS * T::EPS) * <T as Scalar>::from_usize(n) * a.norm_squared();
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        for (j, x) in sq.iter_mut().enumerate() {
            *x = a.column(j).norm_squared();
        }
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (cp, cq) = column_pair(a.as_mut_slice(), m, p, q);
                let gamma = dot(cp, cq);
                let (alpha, beta) = (sq[p], sq[q]);
                if gamma == T::zero() || gamma.abs() <= tol * (alpha * beta).sqrt() || alpha.min(beta) <= floor {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (gamma * T::lit(2.0));
                let t = if zeta == T::zero() {
                    T::one()
                } else {
                    zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt())
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate(cp, cq, c, s);
                sq[p] -= t * gamma;
                sq[q] += t * gamma;
                let (vp, vq) = column_pair(v.as_mut_slice(), n, p, q);
                rotate(vp, vq, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<T> = (0..n).map(|j| a.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap_or(std::cmp::Ordering::Equal));
    let mut u = DMatrix::zeros(m, n);
    let mut vs = DMatrix::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    let mut resolved = 0;
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        if s > T::zero() && s * s > floor {
            u.set_column(dst, &(a.column(src) / s));
            resolved = dst + 1;
        }
        vs.set_column(dst, &v.column(src));
        values.push(s);
    }
    if resolved < n {
        // Noise-level columns: any orthonormal completion is as good.
        let comp = householder_qr(&u.columns(0, resolved).clone_owned()).complement();
        u.columns_mut(resolved, n - resolved).copy_from(&comp.columns(0, n - resolved));
    }
    SortedSvd { u, singular_values: values, v: vs }
}

const JACOBI_MAX_SWEEPS: usize = 80;
const WARM_START_MIN: usize = 32;

fn column_pair<T>(data: &mut [T], m: usize, p: usize, q: usize) -> (&mut [T], &mut [T]) {
    debug_assert!(p < q);
    let (head, tail) = data.split_at_mut(q * m);
    (&mut head[p * m..(p + 1) * m], &mut tail[..m])
}

#[inline]
fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    x.iter().zip(y).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
}

#[inline]
fn rotate<T: Scalar>(x: &mut [T], y: &mut [T], c: T, s: T) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (u, w) = (*a, *b);
        *a = c * u - s * w;
        *b = s * u + c * w;
    }
}

/// Eigenvalues and eigenvectors of the symmetric part of `m`.
///
/// Always computed in `f64`: the single-precision QR iteration can return
/// non-finite eigenvectors on graded spectra.
pub fn symmetric_eigen<T: Scalar>(m: &DMatrix<T>) -> (DVector<T>, DMatrix<T>) {
    let wide = DMatrix::<f64>::from_fn(m.nrows(), m.ncols(), |i, j| {
        0.5 * (m[(i, j)].to_f64_lossy() + m[(j, i)].to_f64_lossy())
    });
    let eig = SymmetricEigen::new(wide);
    (eig.eigenvalues.map(T::lit), eig.eigenvectors.map(T::lit))
}

/// Symmetric eigendecomposition ordered by decreasing magnitude.
pub fn sym_eigen_by_magnitude<T: Scalar>(m: &DMatrix<T>) -> (Vec<T>, DMatrix<T>) {
    let n = m.nrows();
    if n == 0 {
        return (Vec::new(), DMatrix::zeros(0, 0));
    }
    let (values, vectors) = symmetric_eigen(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].abs().partial_cmp(&values[a].abs()).unwrap_or(std::cmp::Ordering::Equal));
    let mut vecs = DMatrix::zeros(n, n);
    let mut vals = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &vectors.column(src));
        vals.push(values[src]);
    }
    (vals, vecs)
}

pub fn symmetrize<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * T::lit(0.5)
}

pub fn frobenius<T: Scalar>(m: &DMatrix<T>) -> T {
    m.norm()
}

/// `||Q^T Q - I||_F`.
pub fn orthonormality_defect<T: Scalar>(q: &DMatrix<T>) -> T {
    let k = q.ncols();
    if k == 0 {
        return T::zero();
    }
    let g = q.transpose() * q - DMatrix::<T>::identity(k, k);
    g.norm()
}

/// Horizontal concatenation of blocks sharing a row count.
pub fn hcat<T: Scalar>(nrows: usize, blocks: &[&DMatrix<T>]) -> DMatrix<T> {
    let width: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(nrows, width);
    let mut c0 = 0;
    for b in blocks {
        debug_assert_eq!(b.nrows(), nrows);
        out.view_mut((0, c0), (nrows, b.ncols())).copy_from(*b);
        c0 += b.ncols();
    }
    out
}

/// Block-diagonal matrix from square (or rectangular) blocks.
pub fn blkdiag<T: Scalar>(blocks: &[&DMatrix<T>]) -> DMatrix<T> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        out.view_mut((r0, c0), b.shape()).copy_from(*b);
        r0 += b.nrows();
        c0 += b.ncols();
    }
    out
}

/// Column-stacking vectorization.
pub fn vec_of<T: Scalar>(m: &DMatrix<T>) -> DVector<T> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvec<T: Scalar>(v: &DVector<T>, nrows: usize, ncols: usize) -> DMatrix<T> {
    DMatrix::from_column_slice(nrows, ncols, v.as_slice())
}

/// Dense Cholesky factor `A = L L^T` that reports the failing pivot.
#[derive(Debug, Clone)]
pub struct DenseCholesky<T: Scalar> {
    l: DMatrix<T>,
    min_pivot: T,
}

impl<T: Scalar> DenseCholesky<T> {
    /// Factors a symmetric matrix; only the lower triangle is read.
    pub fn new(a: DMatrix<T>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Dimension(format!("cholesky of non-square {}x{}", n, a.ncols())));
        }
        let mut l = a;
        let mut min_pivot = T::max_value().unwrap_or(T::one());
        let mut j0 = 0;
        while j0 < n {
            let jb = CHOL_BLOCK.min(n - j0);
            for j in j0..j0 + jb {
                for i in j..n {
                    let mut s = l[(i, j)];
                    for k in j0..j {
                        s -= l[(i, k)] * l[(j, k)];
                    }
                    l[(i, j)] = s;
                }
                let d = l[(j, j)];
                if d <= T::zero() || !d.is_finite_value() {
                    return Err(Error::IndefiniteHessian { pivot: d.to_f64_lossy(), index: j });
                }
                if d < min_pivot {
                    min_pivot = d;
                }
                let djj = d.sqrt();
                l[(j, j)] = djj;
                for i in j + 1..n {
                    l[(i, j)] /= djj;
                }
            }
            let rest = n - j0 - jb;
            if rest > 0 {
                let panel = l.view((j0 + jb, j0), (rest, jb)).clone_owned();
                let mut a22 = l.view_mut((j0 + jb, j0 + jb), (rest, rest));
                a22.gemm(-T::one(), &panel, &panel.transpose(), T::one());
            }
            j0 += jb;
        }
        for j in 0..n {
            for i in 0..j {
                l[(i, j)] = T::zero();
            }
        }
        Ok(Self { l, min_pivot })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Smallest pivot `d_j` (before the square root) seen during factorization.
    pub fn min_pivot(&self) -> T {
        self.min_pivot
    }

    pub fn factor(&self) -> &DMatrix<T> {
        &self.l
    }

    pub fn solve(&self, b: &DVector<T>) -> DVector<T> {
        let n = self.dim();
        let mut y = b.clone();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[(i, k)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[(k, i)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(m: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn qr_reconstructs_tall_matrix() {
        for &(m, n) in &[(200, 70), (50, 50), (9, 3), (40, 1), (5, 12)] {
            let a = random(m, n, (m * n) as u64);
            let (q, r) = thin_qr(&a);
            assert!((&q * &r - &a).norm() <= 1e-12 * a.norm());
            assert!(orthonormality_defect(&q) <= 1e-12);
            for j in 0..r.ncols() {
                for i in j + 1..r.nrows() {
                    assert_eq!(r[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn qr_handles_rank_deficiency_and_zero_columns() {
        let base = random(60, 3, 7);
        let mut a = hcat(60, &[&base, &base, &DMatrix::zeros(60, 2)]);
        a.set_column(7, &base.column(0));
        let (q, r) = thin_qr(&a);
        assert!((&q * &r - &a).norm() <= 1e-12 * a.norm());
        assert!(orthonormality_defect(&q) <= 1e-12);
    }

    #[test]
    fn qr_of_empty_matrix() {
        let a = DMatrix::<f64>::zeros(10, 0);
        let (q, r) = thin_qr(&a);
        assert_eq!(q.shape(), (10, 0));
        assert_eq!(r.shape(), (0, 0));
    }

    #[test]
    fn svd_of_near_singular_core() {
        // nalgebra's bidiagonal SVD loses 1e-3 on this matrix.
        let m = DMatrix::<f64>::from_row_slice(3, 3, &[
            -1.4917225807397765, -1.0682931079297442, -1.0204434471210788,
            -1.0682931079297433, -1.4986657190063963, 0.2501156058133259,
            1.020443447121079, -0.2501156058133255, 2.0096117002541254,
        ]);
        let s = sorted_svd(&m);
        let rec = &s.u * DMatrix::from_diagonal(&DVector::from_vec(s.singular_values.clone())) * s.v.transpose();
        assert!((rec - &m).norm() < 1e-14);
        assert!((s.singular_values[0] - 3.0).abs() < 1e-14);
        assert!(orthonormality_defect(&s.u) < 1e-14 && orthonormality_defect(&s.v) < 1e-14);
    }

    #[test]
    fn svd_of_rank_deficient_and_wide() {
        let b = random(9, 2, 4);
        let a = &b * random(2, 6, 5);
        for m in [a.clone(), a.transpose(), random(40, 3, 6)] {
            let s = sorted_svd(&m);
            let rec = &s.u * DMatrix::from_diagonal(&DVector::from_vec(s.singular_values.clone())) * s.v.transpose();
            assert!((rec - &m).norm() < 1e-13 * m.norm());
            assert!(orthonormality_defect(&s.u) < 1e-13);
            assert!(orthonormality_defect(&s.v) < 1e-13);
        }
    }

    #[test]
    fn svd_is_sorted() {
        let a = random(8, 5, 3);
        let s = sorted_svd(&a);
        assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
        let rec = &s.u * DMatrix::from_diagonal(&DVector::from_vec(s.singular_values.clone())) * s.v.transpose();
        assert!((rec - a).norm() < 1e-12);
    }

    #[test]
    fn cholesky_solves_and_reports_pivot() {
        let b = random(150, 150, 11);
        let a = &b * b.transpose() + DMatrix::identity(150, 150);
        let ch = DenseCholesky::new(a.clone()).unwrap();
        let x = DVector::from_fn(150, |i, _| i as f64);
        let rhs = &a * &x;
        assert!((ch.solve(&rhs) - x).norm() < 1e-8);

        let mut bad = DMatrix::identity(3, 3);
        bad[(2, 2)] = -4.0;
        match DenseCholesky::new(bad) {
            Err(Error::IndefiniteHessian { pivot, index }) => {
                assert_eq!(index, 2);
                assert_eq!(pivot, -4.0);
            }
            other => panic!("expected indefiniteness, got {other:?}"),
        }
    }

    #[test]
    fn qr_in_single_precision() {
        let a = random(100, 20, 5).map(|x| x as f32);
        let (q, r) = thin_qr(&a);
        assert!((&q * &r - &a).norm() <= 1e-5 * a.norm());
        assert!(orthonormality_defect(&q) <= 1e-5);
    }
}
