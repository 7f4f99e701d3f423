//! Preconditioners applied to factored residuals.
//!
//! `P1(X) = E X D` is inverted with two sparse Cholesky factorizations.
//! `P2(X) = M1 X + X M2` is inverted approximately by low-rank ADI with the
//! same shifts on both sides.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dense::symmetric_eigen;
use crate::error::{Error, Result};
use crate::lowrank::{BlockFactorization, LowRankTriple, MultitermOperator};
use crate::scalar::Scalar;
use crate::sparse::{EnvelopeCholesky, SparseSymMatrix};
use crate::truncation::{truncate_qrsvd, truncate_with_cap, Truncated, TruncationParams};

/// `t` geometric shifts `a (b/a)^((2j-1)/(2t))` in `[a, b]`, non-decreasing.
pub fn wachspress_shifts<T: Scalar>(a: T, b: T, t: usize) -> Result<Vec<T>> {
    check_interval(a, b, t)?;
    let (a, b) = (a.to_f64_lossy(), b.to_f64_lossy());
    let ratio = b / a;
    Ok((1..=t)
        .map(|j| T::lit(a * ratio.powf((2 * j - 1) as f64 / (2 * t) as f64)))
        .collect())
}

/// Wachspress' elliptic shifts `b dn(u_j, m)` with `u_j = (2j-1) K(m) / (2t)`,
/// `k' = a/b`, `m = 1 - k'^2`; returned non-decreasing.
///
/// These equioscillate the ADI error over `[a, b]`, which the geometric
/// recipe does not.
pub fn elliptic_shifts<T: Scalar>(a: T, b: T, t: usize) -> Result<Vec<T>> {
    check_interval(a, b, t)?;
    let (a, b) = (a.to_f64_lossy(), b.to_f64_lossy());
    let kp = a / b;
    if kp >= 1.0 {
        return Ok(vec![T::lit(a); t]);
    }
    let k_m = std::f64::consts::FRAC_PI_2 / agm(1.0, kp);
    let mut s: Vec<T> = (1..=t)
        .map(|j| {
            let u = (2 * j - 1) as f64 * k_m / (2 * t) as f64;
            T::lit((b * jacobi_dn(u, kp)).clamp(a, b))
        })
        .collect();
    s.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
    Ok(s)
}

fn check_interval<T: Scalar>(a: T, b: T, t: usize) -> Result<()> {
    if !(a > T::zero()) {
        return Err(Error::InvalidParameter(format!("shift interval needs a > 0, got {a}")));
    }
    if b < a {
        return Err(Error::InvalidParameter(format!("shift interval [{a}, {b}] is empty")));
    }
    if t == 0 {
        return Err(Error::InvalidParameter("at least one ADI shift is required".into()));
    }
    Ok(())
}

fn agm(mut a: f64, mut b: f64) -> f64 {
    for _ in 0..64 {
        if (a - b).abs() <= 1e-16 * a {
            break;
        }
        let an = 0.5 * (a + b);
        b = (a * b).sqrt();
        a = an;
    }
    a
}

/// Jacobi `dn(u | m)` with complementary modulus `kp = sqrt(1 - m)`, by the
/// descending AGM recurrence.
fn jacobi_dn(u: f64, kp: f64) -> f64 {
    let mut a = vec![1.0];
    let mut c = vec![(1.0 - kp * kp).max(0.0).sqrt()];
    let mut b = kp;
    while c.last().copied().unwrap_or(0.0) > 1e-16 && a.len() < 64 {
        let an = a.last().copied().unwrap_or(1.0);
        let next = 0.5 * (an + b);
        c.push(0.5 * (an - b));
        b = (an * b).sqrt();
        a.push(next);
    }
    let n = a.len() - 1;
    let mut phi = (1u64 << n) as f64 * a[n] * u;
    let mut prev = phi;
    for k in (1..=n).rev() {
        prev = phi;
        phi = 0.5 * (phi + (c[k] / a[k] * phi.sin()).asin());
    }
    if n == 0 {
        return 1.0;
    }
    phi.cos() / (prev - phi).cos()
}

/// Shift recipe for the ADI preconditioner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftRecipe {
    Elliptic,
    #[default]
    Geometric,
}

impl ShiftRecipe {
    pub fn shifts<T: Scalar>(self, a: T, b: T, t: usize) -> Result<Vec<T>> {
        match self {
            Self::Elliptic => elliptic_shifts(a, b, t),
            Self::Geometric => wachspress_shifts(a, b, t),
        }
    }
}

impl std::str::FromStr for ShiftRecipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elliptic" => Ok(Self::Elliptic),
            "geometric" => Ok(Self::Geometric),
            other => Err(Error::InvalidParameter(format!(
                "unknown shift recipe `{other}` (expected elliptic or geometric)"
            ))),
        }
    }
}

const LANCZOS_STEPS: usize = 40;

/// Bounds `(a, b)` with `a <= lambda_min(m)` and `b >= lambda_max(m)`.
///
/// Both ends come from Lanczos: with largest Ritz value `theta` and residual
/// norm `rho`, `b = theta + rho` on `m` and `a = 1 / (theta + rho)` on
/// `m^{-1}`, each widened by a rounding margin and clipped to the Gershgorin
/// interval.
pub fn estimate_spectral_interval<T: Scalar>(m: &SparseSymMatrix<T>) -> Result<(T, T)> {
    let n = m.dim();
    if n == 0 {
        return Err(Error::InvalidParameter("empty matrix".into()));
    }
    let (g_lo, g_hi) = m.gershgorin();
    let chol = EnvelopeCholesky::new(m, T::zero())
        .map_err(|e| Error::NotSpd(format!("factorization failed while estimating the spectrum ({e})")))?;
    let (theta, resid) = lanczos_largest(n, LANCZOS_STEPS.min(n), |v| chol.solve_vec(v));
    let margin = T::lit(64.0 * T::EPS);
    let bound = (theta + resid) * (T::one() + margin);
    if !(theta > T::zero()) || !bound.is_finite_value() {
        return Err(Error::NotSpd("nonpositive lower spectral estimate".into()));
    }
    let a = (T::one() / bound).max(g_lo);
    if !(a > T::zero()) {
        return Err(Error::NotSpd("nonpositive lower spectral estimate".into()));
    }
    let (top, top_resid) = lanczos_largest(n, LANCZOS_STEPS.min(n), |v| {
        let mut y = DVector::zeros(n);
        m.mul_vec(v.as_slice(), y.as_mut_slice());
        y
    });
    let b = ((top + top_resid) * (T::one() + margin)).min(g_hi);
    Ok((a, b.max(a)))
}

/// Largest Ritz value of a symmetric operator and its residual norm, with
/// full reorthogonalization.
fn lanczos_largest<T: Scalar>(n: usize, steps: usize, apply: impl Fn(&DVector<T>) -> DVector<T>) -> (T, T) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut q = DVector::<T>::from_fn(n, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        T::lit(z)
    });
    q /= q.norm();
    let mut basis: Vec<DVector<T>> = vec![q];
    let mut alpha = Vec::new();
    let mut beta: Vec<T> = Vec::new();
    loop {
        let k = basis.len() - 1;
        let mut w = apply(&basis[k]);
        let a = basis[k].dot(&w);
        alpha.push(a);
        for _ in 0..2 {
            for v in &basis {
                let d = v.dot(&w);
                w.axpy(-d, v, T::one());
            }
        }
        let b = w.norm();
        let scale = alpha.iter().fold(T::zero(), |acc: T, x| acc.max(x.abs()));
        if basis.len() >= steps || b <= T::lit(1e-14) * scale {
            beta.push(b);
            break;
        }
        beta.push(b);
        basis.push(w / b);
    }
    let k = alpha.len();
    let mut tri = DMatrix::zeros(k, k);
    for i in 0..k {
        tri[(i, i)] = alpha[i];
        if i + 1 < k {
            tri[(i, i + 1)] = beta[i];
            tri[(i + 1, i)] = beta[i];
        }
    }
    let (values, vectors) = symmetric_eigen(&tri);
    let (imax, theta) = values
        .iter()
        .copied()
        .enumerate()
        .fold((0, T::min_value().unwrap_or(-T::one())), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    let last = vectors[(k - 1, imax)].abs();
    (theta, beta[k - 1] * last)
}

/// Description of a preconditioner before any factorization.
#[derive(Debug, Clone)]
pub enum PreconditionerSpec<T: Scalar> {
    Identity,
    /// `P1(X) = E X D`.
    OneTerm { e: Arc<SparseSymMatrix<T>>, d: Arc<SparseSymMatrix<T>> },
    /// `P2(X) = M1 X + X M2`, inverted by `t_adi` ADI steps.
    TwoTermAdi {
        m1: Arc<SparseSymMatrix<T>>,
        m2: Arc<SparseSymMatrix<T>>,
        t_adi: usize,
        recipe: ShiftRecipe,
        /// Recompress after every ADI step.
        truncate_steps: bool,
    },
}

/// Preconditioner kind as selected on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecondKind {
    None,
    P1,
    #[default]
    P2,
}

impl std::str::FromStr for PrecondKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "p1" => Ok(Self::P1),
            "p2" => Ok(Self::P2),
            other => Err(Error::InvalidParameter(format!(
                "unknown preconditioner `{other}` (expected none, p1 or p2)"
            ))),
        }
    }
}

impl std::fmt::Display for PrecondKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::P1 => "p1",
            Self::P2 => "p2",
        })
    }
}

impl<T: Scalar> PreconditionerSpec<T> {
    /// Default preconditioner derived from the operator terms.
    ///
    /// `P1` uses the first term `(A_1, B_1)`. `P2` sums the left matrices of
    /// all `(A, I)` terms into `M1` and the right matrices of all `(I, B)`
    /// terms into `M2`.
    pub fn from_operator(op: &MultitermOperator<T>, kind: PrecondKind, t_adi: usize) -> Result<Self> {
        match kind {
            PrecondKind::None => Ok(Self::Identity),
            PrecondKind::P1 => {
                let pairs = op.pairs();
                Ok(Self::OneTerm { e: pairs[0].0.clone(), d: pairs[0].1.clone() })
            }
            PrecondKind::P2 => {
                let mut left = Vec::new();
                let mut right = Vec::new();
                for (a, b) in op.pairs() {
                    if b.is_identity() && !a.is_identity() {
                        left.push(a);
                    } else if a.is_identity() && !b.is_identity() {
                        right.push(b);
                    }
                }
                if left.is_empty() || right.is_empty() {
                    return Err(Error::InvalidParameter(
                        "two-term preconditioner needs operator terms of the form (A, I) and (I, B)".into(),
                    ));
                }
                Ok(Self::TwoTermAdi {
                    m1: sum_matrices(&left)?,
                    m2: sum_matrices(&right)?,
                    t_adi,
                    recipe: ShiftRecipe::default(),
                    truncate_steps: false,
                })
            }
        }
    }
}

fn sum_matrices<T: Scalar>(ms: &[Arc<SparseSymMatrix<T>>]) -> Result<Arc<SparseSymMatrix<T>>> {
    if ms.len() == 1 {
        return Ok(ms[0].clone());
    }
    let n = ms[0].dim();
    let mut trip = Vec::new();
    for m in ms {
        for i in 0..n {
            trip.extend(m.row(i).map(|(j, v)| (i, j, v)));
        }
    }
    Ok(Arc::new(SparseSymMatrix::from_triplets(n, &trip)?))
}

/// Factorized preconditioner ready for repeated application.
#[derive(Debug, Clone)]
pub enum Preconditioner<T: Scalar> {
    Identity,
    OneTerm { e: EnvelopeCholesky<T>, d: EnvelopeCholesky<T> },
    Adi(AdiInverse<T>),
}

/// LR-ADI approximation of the inverse of `X -> M1 X + X M2`.
#[derive(Debug, Clone)]
pub struct AdiInverse<T: Scalar> {
    shifts: Vec<T>,
    left: Vec<EnvelopeCholesky<T>>,
    right: Vec<EnvelopeCholesky<T>>,
    truncate_steps: bool,
    interval: (T, T),
}

impl<T: Scalar> AdiInverse<T> {
    pub fn new(
        m1: &SparseSymMatrix<T>,
        m2: &SparseSymMatrix<T>,
        t_adi: usize,
        recipe: ShiftRecipe,
        truncate_steps: bool,
    ) -> Result<Self> {
        let (a1, b1) = estimate_spectral_interval(m1)?;
        let (a2, b2) = estimate_spectral_interval(m2)?;
        let interval = (a1.min(a2), b1.max(b2));
        let shifts = recipe.shifts(interval.0, interval.1, t_adi)?;
        Self::with_shifts(m1, m2, shifts, truncate_steps, interval)
    }

    pub fn with_shifts(
        m1: &SparseSymMatrix<T>,
        m2: &SparseSymMatrix<T>,
        shifts: Vec<T>,
        truncate_steps: bool,
        interval: (T, T),
    ) -> Result<Self> {
        if shifts.is_empty() || shifts.iter().any(|s| !(*s > T::zero())) {
            return Err(Error::InvalidParameter("ADI shifts must be positive and nonempty".into()));
        }
        let mut left = Vec::with_capacity(shifts.len());
        let mut right = Vec::with_capacity(shifts.len());
        for &s in &shifts {
            left.push(EnvelopeCholesky::new(m1, s)?);
            right.push(EnvelopeCholesky::new(m2, s)?);
        }
        Ok(Self { shifts, left, right, truncate_steps, interval })
    }

    pub fn shifts(&self) -> &[T] {
        &self.shifts
    }

    pub fn interval(&self) -> (T, T) {
        self.interval
    }

    /// Untruncated ADI approximation after the first `steps` shifts:
    /// `sum_i V_i (2 sigma_i rho) W_i^T` with
    /// `V_1 = (M1 + s_1 I)^{-1} R^l`,
    /// `V_{i+1} = V_i - (s_{i+1} + s_i) (M1 + s_{i+1} I)^{-1} V_i`,
    /// and the same recurrence for `W` with `M2` and `R^r`.
    pub fn blocks(&self, r: &LowRankTriple<T>, steps: usize) -> Result<BlockFactorization<T>> {
        let steps = steps.min(self.shifts.len());
        let (n_a, n_b) = (r.n_a(), r.n_b());
        if n_a != self.left[0].dim() || n_b != self.right[0].dim() {
            return Err(Error::Dimension(format!(
                "residual is {n_a}x{n_b}, preconditioner acts on {}x{}",
                self.left[0].dim(),
                self.right[0].dim()
            )));
        }
        if r.rank() == 0 {
            return BlockFactorization::from_terms(n_a, n_b, Vec::new());
        }
        let mut terms = Vec::with_capacity(steps);
        let mut v = self.left[0].solve_dense(r.left());
        let mut w = self.right[0].solve_dense(r.right());
        for i in 0..steps {
            let s = self.shifts[i];
            if i > 0 {
                let f = self.shifts[i - 1] + s;
                v -= self.left[i].solve_dense(&v) * f;
                w -= self.right[i].solve_dense(&w) * f;
            }
            terms.push((v.clone(), r.core() * (s * T::lit(2.0)), w.clone()));
        }
        BlockFactorization::from_terms(n_a, n_b, terms)
    }

    /// ADI with recompression to `2 maxrank` columns after every step.
    fn apply_truncating(&self, r: &LowRankTriple<T>, params: &TruncationParams) -> Result<Truncated<T>> {
        let (n_a, n_b) = (r.n_a(), r.n_b());
        let cap = 2 * params.maxrank;
        let mut acc = LowRankTriple::zero(n_a, n_b);
        let mut tail2 = T::zero();
        let mut v = self.left[0].solve_dense(r.left());
        let mut w = self.right[0].solve_dense(r.right());
        for i in 0..self.shifts.len() {
            let s = self.shifts[i];
            if i > 0 {
                let f = self.shifts[i - 1] + s;
                v -= self.left[i].solve_dense(&v) * f;
                w -= self.right[i].solve_dense(&w) * f;
            }
            let (al, ac, ar) = acc.into_parts();
            let bf = BlockFactorization::from_terms(
                n_a,
                n_b,
                vec![(al, ac, ar), (v.clone(), r.core() * (s * T::lit(2.0)), w.clone())],
            )?;
            let t = truncate_with_cap(&bf, params.tolrank, cap)?;
            tail2 += t.tail * t.tail;
            acc = t.value;
        }
        let out = truncate_qrsvd(&acc.as_blocks(), params)?;
        Ok(Truncated { value: out.value, tail: (tail2 + out.tail * out.tail).sqrt() })
    }
}

impl<T: Scalar> Preconditioner<T> {
    pub fn new(spec: &PreconditionerSpec<T>) -> Result<Self> {
        match spec {
            PreconditionerSpec::Identity => Ok(Self::Identity),
            PreconditionerSpec::OneTerm { e, d } => {
                let ef = EnvelopeCholesky::new(e, T::zero())
                    .map_err(|err| Error::Singular(format!("left preconditioner matrix: {err}")))?;
                let df = EnvelopeCholesky::new(d, T::zero())
                    .map_err(|err| Error::Singular(format!("right preconditioner matrix: {err}")))?;
                Ok(Self::OneTerm { e: ef, d: df })
            }
            PreconditionerSpec::TwoTermAdi { m1, m2, t_adi, recipe, truncate_steps } => {
                Ok(Self::Adi(AdiInverse::new(m1, m2, *t_adi, *recipe, *truncate_steps)?))
            }
        }
    }

    /// `T(P^{-1}(R))` truncated to `maxrank`.
    pub fn apply(&self, r: &LowRankTriple<T>, params: &TruncationParams) -> Result<Truncated<T>> {
        match self {
            Self::Identity => truncate_qrsvd(&r.as_blocks(), params),
            Self::OneTerm { e, d } => apply_p1_inverse(e, d, r, params),
            Self::Adi(adi) => apply_p2_adi_inverse(adi, r, params),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Self::Identity)
    }
}

/// `T(E^{-1} R^l, rho, D^{-1} R^r)`.
pub fn apply_p1_inverse<T: Scalar>(
    e: &EnvelopeCholesky<T>,
    d: &EnvelopeCholesky<T>,
    r: &LowRankTriple<T>,
    params: &TruncationParams,
) -> Result<Truncated<T>> {
    if r.n_a() != e.dim() || r.n_b() != d.dim() {
        return Err(Error::Dimension(format!(
            "residual is {}x{}, preconditioner acts on {}x{}",
            r.n_a(),
            r.n_b(),
            e.dim(),
            d.dim()
        )));
    }
    if r.rank() == 0 {
        return Ok(Truncated { value: r.clone(), tail: T::zero() });
    }
    let bf = BlockFactorization::new(vec![e.solve_dense(r.left())], r.core().clone(), vec![d.solve_dense(r.right())])?;
    truncate_qrsvd(&bf, params)
}

/// Low-rank ADI approximation of `Z` with `M1 Z + Z M2 = R`, truncated.
pub fn apply_p2_adi_inverse<T: Scalar>(
    adi: &AdiInverse<T>,
    r: &LowRankTriple<T>,
    params: &TruncationParams,
) -> Result<Truncated<T>> {
    if r.rank() == 0 {
        return Ok(Truncated { value: r.clone(), tail: T::zero() });
    }
    if adi.truncate_steps {
        return adi.apply_truncating(r, params);
    }
    let bf = adi.blocks(r, adi.shifts.len())?;
    truncate_qrsvd(&bf, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::orthonormal_columns;
    use rand::Rng;

    fn rd(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> SparseSymMatrix<f64> {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, shift + rng.random_range(1.0..2.0)));
            for j in 0..i {
                if rng.random::<f64>() < 0.3 {
                    t.push((i, j, rng.random_range(-0.4..0.4)));
                }
            }
        }
        SparseSymMatrix::from_triplets(n, &t).unwrap()
    }

    fn triple(rng: &mut ChaCha8Rng, na: usize, nb: usize, r: usize) -> LowRankTriple<f64> {
        LowRankTriple::new(orthonormal_columns(&rd(rng, na, r)), rd(rng, r, r), orthonormal_columns(&rd(rng, nb, r)))
            .unwrap()
    }

    fn laplacian_1d(n: usize) -> SparseSymMatrix<f64> {
        SparseSymMatrix::tridiagonal(&vec![2.0; n], &vec![-1.0; n - 1]).unwrap()
    }

    fn wide() -> TruncationParams {
        TruncationParams::new(1e-15, 400).unwrap()
    }

    #[test]
    fn geometric_shift_examples() {
        assert_eq!(wachspress_shifts(2.5, 2.5, 3).unwrap(), vec![2.5; 3]);
        let s = wachspress_shifts(4.0f64, 9.0, 1).unwrap();
        assert!((s[0] - 6.0).abs() < 1e-14);
        let s = wachspress_shifts(1.0f64, 100.0, 2).unwrap();
        assert!((s[0] - 3.1622776601683795).abs() < 1e-12);
        assert!((s[1] - 31.622776601683793).abs() < 1e-12);
        assert!(wachspress_shifts(0.0, 1.0, 2).is_err());
        assert!(wachspress_shifts(-1.0, 1.0, 2).is_err());
    }

    #[test]
    fn shifts_scale_with_interval() {
        for recipe in [ShiftRecipe::Geometric, ShiftRecipe::Elliptic] {
            let s1 = recipe.shifts(0.3f64, 700.0, 6).unwrap();
            let s2 = recipe.shifts(0.3f64 * 7.5, 700.0 * 7.5, 6).unwrap();
            for (x, y) in s1.iter().zip(&s2) {
                assert!((x * 7.5 - y).abs() <= 1e-12 * y);
            }
            assert!(s1.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn elliptic_shifts_are_symmetric_in_log_scale() {
        let (a, b) = (1.0f64, 1e4);
        let s = elliptic_shifts(a, b, 8).unwrap();
        for j in 0..8 {
            assert!((s[j] * s[7 - j] - a * b).abs() <= 1e-9 * a * b, "{s:?}");
        }
        let one = elliptic_shifts(4.0f64, 9.0, 1).unwrap();
        assert!((one[0] - 6.0).abs() < 1e-12);
        assert_eq!(elliptic_shifts(3.0, 3.0, 2).unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn elliptic_shifts_beat_geometric_minimax() {
        let (a, b, t) = (1.0f64, 1e4f64, 8);
        let worst = |s: &[f64]| {
            (0..=4000)
                .map(|k| a * (b / a).powf(k as f64 / 4000.0))
                .map(|x| s.iter().map(|&p| ((x - p) / (x + p)).abs()).product::<f64>())
                .fold(0.0, f64::max)
        };
        let e = worst(&elliptic_shifts(a, b, t).unwrap());
        let g = worst(&wachspress_shifts(a, b, t).unwrap());
        // Residual of the two-sided iteration carries the factor twice.
        assert!(e * e < 0.003, "{e}");
        assert!(g * g > 5.0 * e * e, "{g} vs {e}");
    }

    #[test]
    fn interval_examples() {
        let m = SparseSymMatrix::diagonal(&[3.0; 6]);
        let (a, b) = estimate_spectral_interval(&m).unwrap();
        assert!(a <= 3.0 && b >= 3.0 && b / a <= 1.01);

        let d: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        let (a, b) = estimate_spectral_interval(&SparseSymMatrix::diagonal(&d)).unwrap();
        assert!(a <= 1.0 + 1e-12 && b >= 10.0, "{a} {b}");

        let n = 50;
        let (a, b) = estimate_spectral_interval(&laplacian_1d(n)).unwrap();
        let h = std::f64::consts::PI / (2.0 * (n + 1) as f64);
        let lmin = 4.0 * h.sin().powi(2);
        let lmax = 4.0 * (n as f64 * h).sin().powi(2);
        assert!(a <= lmin * (1.0 + 1e-10) && a >= 0.5 * lmin, "{a} vs {lmin}");
        assert!(b >= lmax);

        let bad = SparseSymMatrix::diagonal(&[1.0, -2.0]);
        assert!(matches!(estimate_spectral_interval(&bad), Err(Error::NotSpd(_))));
    }

    #[test]
    fn p1_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = triple(&mut rng, 8, 7, 2);
        let i8 = EnvelopeCholesky::new(&SparseSymMatrix::identity(8), 0.0).unwrap();
        let i7 = EnvelopeCholesky::new(&SparseSymMatrix::identity(7), 0.0).unwrap();
        let z = apply_p1_inverse(&i8, &i7, &r, &wide()).unwrap();
        assert!((z.value.to_dense() - r.to_dense()).norm() < 1e-14);

        let u = orthonormal_columns(&rd(&mut rng, 8, 1));
        let v = orthonormal_columns(&rd(&mut rng, 7, 1));
        let r = LowRankTriple::new(u, DMatrix::from_element(1, 1, 4.0), v).unwrap();
        let e2 = EnvelopeCholesky::new(&SparseSymMatrix::diagonal(&[2.0; 8]), 0.0).unwrap();
        let z = apply_p1_inverse(&e2, &i7, &r, &wide()).unwrap();
        assert!((z.value.core()[(0, 0)] - 2.0).abs() < 1e-14);

        let e = random_spd(&mut rng, 16, 0.0);
        let d = random_spd(&mut rng, 16, 0.0);
        let r = triple(&mut rng, 16, 16, 2);
        let spec = PreconditionerSpec::OneTerm { e: Arc::new(e.clone()), d: Arc::new(d.clone()) };
        let p = Preconditioner::new(&spec).unwrap();
        let z = p.apply(&r, &wide()).unwrap().value.to_dense();
        let back = e.to_dense() * &z * d.to_dense();
        assert!((&back - r.to_dense()).norm() <= 1e-11 * r.to_dense().norm());
    }

    #[test]
    fn adi_identity_gives_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let i = SparseSymMatrix::identity(6);
        let adi = AdiInverse::with_shifts(&i, &i, vec![1.0], false, (1.0, 1.0)).unwrap();
        let r = triple(&mut rng, 6, 6, 2);
        let z = apply_p2_adi_inverse(&adi, &r, &wide()).unwrap();
        assert!((z.value.to_dense() - r.to_dense() * 0.5).norm() < 1e-14);
        let z0 = apply_p2_adi_inverse(&adi, &LowRankTriple::zero(6, 6), &wide()).unwrap();
        assert_eq!(z0.value.rank(), 0);
    }

    fn sylvester_residual(m1: &DMatrix<f64>, m2: &DMatrix<f64>, z: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
        (m1 * z + z * m2 - r).norm() / r.norm()
    }

    #[test]
    fn adi_matches_sylvester_and_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m1 = random_spd(&mut rng, 16, 0.5);
        let m2 = random_spd(&mut rng, 16, 0.5);
        let r = triple(&mut rng, 16, 16, 2);
        let adi = AdiInverse::new(&m1, &m2, 8, ShiftRecipe::Elliptic, false).unwrap();
        let (d1, d2, rd_) = (m1.to_dense(), m2.to_dense(), r.to_dense());
        let mut prev = f64::INFINITY;
        for steps in 1..=8 {
            let z = adi.blocks(&r, steps).unwrap().to_dense();
            let res = sylvester_residual(&d1, &d2, &z, &rd_);
            assert!(res <= prev * (1.0 + 1e-12), "steps {steps}: {res} > {prev}");
            prev = res;
        }
        assert!(prev <= 1e-4, "{prev}");
        let geo = AdiInverse::new(&m1, &m2, 8, ShiftRecipe::Geometric, false).unwrap();
        let z = apply_p2_adi_inverse(&geo, &r, &wide()).unwrap().value.to_dense();
        assert!(sylvester_residual(&d1, &d2, &z, &rd_) <= 1e-4);
    }

    #[test]
    fn adi_step_truncation_stays_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m1 = laplacian_1d(30);
        let m2 = random_spd(&mut rng, 20, 0.5);
        let r = triple(&mut rng, 30, 20, 2);
        let full = AdiInverse::new(&m1, &m2, 6, ShiftRecipe::Elliptic, false).unwrap();
        let trunc = AdiInverse::new(&m1, &m2, 6, ShiftRecipe::Elliptic, true).unwrap();
        let p = TruncationParams::new(1e-12, 8).unwrap();
        let a = apply_p2_adi_inverse(&full, &r, &p).unwrap().value;
        let b = apply_p2_adi_inverse(&trunc, &r, &p).unwrap().value;
        assert!(b.rank() <= 8 && b.is_orthonormal());
        let (ad, bd) = (a.to_dense(), b.to_dense());
        assert!((&ad - &bd).norm() <= 1e-6 * ad.norm(), "{}", (&ad - &bd).norm() / ad.norm());
    }

    #[test]
    fn spec_from_operator_picks_lyapunov_terms() {
        let a = Arc::new(laplacian_1d(5));
        let i = Arc::new(SparseSymMatrix::identity(5));
        let m = Arc::new(SparseSymMatrix::diagonal(&[0.1; 5]));
        let op = MultitermOperator::new(vec![(a.clone(), i.clone()), (i.clone(), a.clone()), (m.clone(), m)]).unwrap();
        match PreconditionerSpec::from_operator(&op, PrecondKind::P2, 4).unwrap() {
            PreconditionerSpec::TwoTermAdi { m1, m2, t_adi, .. } => {
                assert!(m1.same_as(&a) && m2.same_as(&a));
                assert_eq!(t_adi, 4);
            }
            other => panic!("unexpected {other:?}"),
        }
        let only_left = MultitermOperator::new(vec![(a, i)]).unwrap();
        assert!(PreconditionerSpec::from_operator(&only_left, PrecondKind::P2, 4).is_err());
        assert!(matches!(
            PreconditionerSpec::from_operator(&only_left, PrecondKind::P1, 4).unwrap(),
            PreconditionerSpec::OneTerm { .. }
        ));
    }
}
