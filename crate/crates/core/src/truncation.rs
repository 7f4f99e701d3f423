//! QR-SVD truncation and the residual compression strategies.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dense::{hcat, householder_qr, sorted_svd, sym_eigen_by_magnitude, thin_qr, HouseholderQr, SortedSvd};
use crate::error::{Error, Result};
use crate::lowrank::{BlockFactorization, LowRankTriple, MultitermOperator};
use crate::scalar::Scalar;

/// Rank control shared by every truncation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationParams {
    /// Relative singular value drop tolerance.
    pub tolrank: f64,
    pub maxrank: usize,
    /// Rank cap for residual factors.
    pub maxrank_r: usize,
}

impl TruncationParams {
    /// `maxrank_r` defaults to `2 * maxrank`.
    pub fn new(tolrank: f64, maxrank: usize) -> Result<Self> {
        Self::with_residual_cap(tolrank, maxrank, 2 * maxrank)
    }

    pub fn with_residual_cap(tolrank: f64, maxrank: usize, maxrank_r: usize) -> Result<Self> {
        let p = Self { tolrank, maxrank, maxrank_r };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolrank > 0.0 && self.tolrank < 1.0) {
            return Err(Error::InvalidParameter(format!("tolrank must lie in (0, 1), got {}", self.tolrank)));
        }
        if self.maxrank < 1 {
            return Err(Error::InvalidParameter("maxrank must be at least 1".into()));
        }
        if self.maxrank_r < self.maxrank {
            return Err(Error::InvalidParameter(format!(
                "maxrank_r ({}) must be at least maxrank ({})",
                self.maxrank_r, self.maxrank
            )));
        }
        Ok(())
    }
}

/// Truncated triple with the Frobenius norm of the discarded singular values.
#[derive(Debug, Clone)]
pub struct Truncated<T: Scalar> {
    pub value: LowRankTriple<T>,
    pub tail: T,
}

/// Number of leading values with `sigma_j / sigma_1 > tolrank`, capped.
pub fn retained_rank<T: Scalar>(sigma: &[T], tolrank: f64, cap: usize) -> usize {
    let Some(&s1) = sigma.first() else { return 0 };
    if s1 <= T::zero() {
        return 0;
    }
    let thresh = s1 * T::lit(tolrank);
    sigma.iter().take(cap).take_while(|&&s| s > thresh).count()
}

fn tail_norm<T: Scalar>(sigma: &[T], kept: usize) -> T {
    sigma[kept..].iter().fold(T::zero(), |acc, &s| acc + s * s).sqrt()
}

fn diag<T: Scalar>(values: &[T]) -> DMatrix<T> {
    DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(values))
}

fn cut_svd<T: Scalar>(
    ql: &HouseholderQr<T>,
    qr: &HouseholderQr<T>,
    n_a: usize,
    n_b: usize,
    svd: &SortedSvd<T>,
    tolrank: f64,
    cap: usize,
) -> Truncated<T> {
    let sigma = &svd.singular_values;
    let k = retained_rank(sigma, tolrank, cap);
    let tail = tail_norm(sigma, k);
    if k == 0 {
        return Truncated { value: LowRankTriple::zero(n_a, n_b), tail };
    }
    let left = ql.apply_q(&svd.u.columns(0, k).clone_owned());
    let right = qr.apply_q(&svd.v.columns(0, k).clone_owned());
    Truncated {
        value: LowRankTriple::from_parts_unchecked(left, diag(&sigma[..k]), right),
        tail,
    }
}

/// [`cut_svd`] with explicit orthonormal bases.
fn cut_svd_dense<T: Scalar>(
    ql: &DMatrix<T>,
    qr: &DMatrix<T>,
    svd: &SortedSvd<T>,
    tolrank: f64,
    cap: usize,
) -> Truncated<T> {
    let sigma = &svd.singular_values;
    let k = retained_rank(sigma, tolrank, cap);
    let tail = tail_norm(sigma, k);
    if k == 0 {
        return Truncated { value: LowRankTriple::zero(ql.nrows(), qr.nrows()), tail };
    }
    let left = ql * svd.u.columns(0, k);
    let right = qr * svd.v.columns(0, k);
    Truncated {
        value: LowRankTriple::from_parts_unchecked(left, diag(&sigma[..k]), right),
        tail,
    }
}

/// QR-SVD truncation with rank cap `params.maxrank`.
pub fn truncate_qrsvd<T: Scalar>(bf: &BlockFactorization<T>, params: &TruncationParams) -> Result<Truncated<T>> {
    truncate_with_cap(bf, params.tolrank, params.maxrank)
}

/// QR-SVD truncation of `[L_j] D [R_j]^T` keeping at most `cap` values.
pub fn truncate_with_cap<T: Scalar>(bf: &BlockFactorization<T>, tolrank: f64, cap: usize) -> Result<Truncated<T>> {
    if !bf.is_finite() {
        return Err(Error::NonFinite("truncation input"));
    }
    let (n_a, n_b) = (bf.n_a(), bf.n_b());
    if bf.width() == 0 || n_a == 0 || n_b == 0 {
        return Ok(Truncated { value: LowRankTriple::zero(n_a, n_b), tail: T::zero() });
    }
    let ql = householder_qr(&bf.left_stacked());
    let qr = householder_qr(&bf.right_stacked());
    let mid = ql.r() * bf.core() * qr.r().transpose();
    let svd = sorted_svd(&mid);
    Ok(cut_svd(&ql, &qr, n_a, n_b, &svd, tolrank, cap))
}

/// Symmetric truncation of `[L_j] D [L_j]^T` with symmetric `D`.
///
/// The result has identical left and right factors and a diagonal core that
/// may carry negative entries.
pub fn truncate_symmetric<T: Scalar>(
    blocks: &[&DMatrix<T>],
    core: &DMatrix<T>,
    tolrank: f64,
    cap: usize,
) -> Result<Truncated<T>> {
    let n = blocks.first().map_or(0, |b| b.nrows());
    let stacked = hcat(n, blocks);
    if stacked.ncols() != core.nrows() || core.nrows() != core.ncols() {
        return Err(Error::Dimension("symmetric truncation core does not match blocks".into()));
    }
    if !stacked.iter().chain(core.iter()).all(|v| v.is_finite_value()) {
        return Err(Error::NonFinite("truncation input"));
    }
    if stacked.ncols() == 0 || n == 0 {
        return Ok(Truncated { value: LowRankTriple::zero(n, n), tail: T::zero() });
    }
    let (q, r) = thin_qr(&stacked);
    let mid = &r * core * r.transpose();
    let (vals, vecs) = sym_eigen_by_magnitude(&mid);
    let mags: Vec<T> = vals.iter().map(|v| v.abs()).collect();
    let k = retained_rank(&mags, tolrank, cap);
    let tail = tail_norm(&mags, k);
    if k == 0 {
        return Ok(Truncated { value: LowRankTriple::zero(n, n), tail });
    }
    let f = q * vecs.columns(0, k);
    Ok(Truncated {
        value: LowRankTriple::from_parts_unchecked(f.clone(), diag(&vals[..k]), f),
        tail,
    })
}

fn check_residual_inputs<T: Scalar>(
    op: &MultitermOperator<T>,
    c: &LowRankTriple<T>,
    x: &LowRankTriple<T>,
) -> Result<()> {
    if c.n_a() != op.n_a() || c.n_b() != op.n_b() {
        return Err(Error::Dimension(format!(
            "right-hand side is {}x{}, operator acts on {}x{}",
            c.n_a(),
            c.n_b(),
            op.n_a(),
            op.n_b()
        )));
    }
    if x.n_a() != op.n_a() || x.n_b() != op.n_b() {
        return Err(Error::Dimension(format!(
            "iterate is {}x{}, operator acts on {}x{}",
            x.n_a(),
            x.n_b(),
            op.n_a(),
            op.n_b()
        )));
    }
    Ok(())
}

/// Lazy blocks of `C - L(X)`.
pub fn residual_blocks<T: Scalar>(
    op: &MultitermOperator<T>,
    c: &LowRankTriple<T>,
    x: &LowRankTriple<T>,
) -> Result<BlockFactorization<T>> {
    check_residual_inputs(op, c, x)?;
    let l = op.num_terms();
    let mut left = Vec::with_capacity(l + 1);
    let mut right = Vec::with_capacity(l + 1);
    left.push(c.left().clone());
    right.push(c.right().clone());
    let neg_tau = -x.core();
    let mut cores = vec![c.core().clone()];
    for i in 0..l {
        left.push(op.apply_left(i, x.left()));
        right.push(op.apply_right(i, x.right()));
        cores.push(neg_tau.clone());
    }
    let refs: Vec<&DMatrix<T>> = cores.iter().collect();
    BlockFactorization::new(left, crate::dense::blkdiag(&refs), right)
}

/// `T_res(C - L(X))` from the full stacked factors, capped at `maxrank_r`.
pub fn residual_full<T: Scalar>(
    op: &MultitermOperator<T>,
    c: &LowRankTriple<T>,
    x: &LowRankTriple<T>,
    params: &TruncationParams,
) -> Result<Truncated<T>> {
    let bf = residual_blocks(op, c, x)?;
    truncate_with_cap(&bf, params.tolrank, params.maxrank_r)
}

/// One side of the dynamic QR update: `Q r` with `Q` orthonormal.
struct DynamicSide<T: Scalar> {
    q: DMatrix<T>,
    r: DMatrix<T>,
    dropped: T,
}

impl<T: Scalar> DynamicSide<T> {
    fn new(first: DMatrix<T>) -> Self {
        let (q, r) = thin_qr(&first);
        Self { q, r, dropped: T::zero() }
    }

    /// `[Q, B] = Q1 r1`, then `r <- r1 blkdiag(r, I)`, truncated through the
    /// SVD of `r1`.
    fn append(&mut self, block: &DMatrix<T>, tolrank: f64, cap: usize) {
        let n = self.q.nrows();
        let k = self.q.ncols();
        let w = block.ncols();
        // Block Gram-Schmidt with one reorthogonalization pass.
        let c1 = self.q.transpose() * block;
        let mut rest = block - &self.q * &c1;
        let c2 = self.q.transpose() * &rest;
        rest -= &self.q * &c2;
        let coeff = c1 + c2;
        let (qw, rw) = thin_qr(&rest);
        let q1 = hcat(n, &[&self.q, &qw]);
        let k1 = q1.ncols();
        let mut r1 = DMatrix::zeros(k1, k + w);
        r1.view_mut((0, 0), (k, k)).fill_with_identity();
        r1.view_mut((0, k), (k, w)).copy_from(&coeff);
        r1.view_mut((k, k), rw.shape()).copy_from(&rw);

        let svd = sorted_svd(&r1);
        let i = retained_rank(&svd.singular_values, tolrank, cap);
        let t = tail_norm(&svd.singular_values, i);
        self.dropped = (self.dropped * self.dropped + t * t).sqrt();
        self.q = q1 * svd.u.columns(0, i);
        let sv = diag(&svd.singular_values[..i]) * svd.v.columns(0, i).transpose();
        let old = self.r.ncols();
        let mut next = DMatrix::zeros(i, old + w);
        next.view_mut((0, 0), (i, old)).copy_from(&(sv.columns(0, k) * &self.r));
        next.view_mut((0, old), (i, w)).copy_from(&sv.columns(k, w));
        self.r = next;
    }
}

/// Residual by sequential thin QR appends of `C_1 gamma, A_j X^l tau` and
/// `C_2, -B_j X^r`, truncating each side to `maxrank_r` after every append.
pub fn residual_dynamic<T: Scalar>(
    op: &MultitermOperator<T>,
    c: &LowRankTriple<T>,
    x: &LowRankTriple<T>,
    params: &TruncationParams,
) -> Result<Truncated<T>> {
    check_residual_inputs(op, c, x)?;
    let (n_a, n_b) = (op.n_a(), op.n_b());
    let mut left = DynamicSide::new(c.left() * c.core());
    let mut right = DynamicSide::new(c.right().clone());
    if x.rank() > 0 {
        let xt = x.left() * x.core();
        for j in 0..op.num_terms() {
            left.append(&op.apply_left(j, &xt), params.tolrank, params.maxrank_r);
            right.append(&(-op.apply_right(j, x.right())), params.tolrank, params.maxrank_r);
        }
    }
    let mid = &left.r * right.r.transpose();
    if !mid.iter().all(|v| v.is_finite_value()) {
        return Err(Error::NonFinite("dynamic residual"));
    }
    if mid.is_empty() {
        return Ok(Truncated { value: LowRankTriple::zero(n_a, n_b), tail: T::zero() });
    }
    let svd = sorted_svd(&mid);
    let mut out = cut_svd_dense(&left.q, &right.q, &svd, params.tolrank, params.maxrank_r);
    let d = left.dropped * left.dropped + right.dropped * right.dropped;
    out.tail = (out.tail * out.tail + d).sqrt();
    Ok(out)
}

/// Gaussian sketches for the randomized range finder.
#[derive(Debug, Clone)]
pub struct SketchPair<T: Scalar> {
    /// `n_b x m`, applied to `R`.
    pub g_left: DMatrix<T>,
    /// `n_a x m`, applied to `R^T`.
    pub g_right: DMatrix<T>,
    pub seed: u64,
}

impl<T: Scalar> SketchPair<T> {
    pub fn new(n_a: usize, n_b: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |r: usize, c: usize| {
            let vals: Vec<T> = (0..r * c)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    T::lit(z)
                })
                .collect();
            DMatrix::from_vec(r, c, vals)
        };
        let g_left = draw(n_b, width);
        let g_right = draw(n_a, width);
        Self { g_left, g_right, seed }
    }

    pub fn width(&self) -> usize {
        self.g_left.ncols()
    }
}

/// Randomized range-finder residual.
pub fn residual_randomized<T: Scalar>(
    op: &MultitermOperator<T>,
    c: &LowRankTriple<T>,
    x: &LowRankTriple<T>,
    sketch: &SketchPair<T>,
    params: &TruncationParams,
) -> Result<Truncated<T>> {
    check_residual_inputs(op, c, x)?;
    if sketch.g_left.nrows() != op.n_b() || sketch.g_right.nrows() != op.n_a() {
        return Err(Error::Dimension(format!(
            "sketches are {}x{} and {}x{} for a {}x{} operator",
            sketch.g_left.nrows(),
            sketch.g_left.ncols(),
            sketch.g_right.nrows(),
            sketch.g_right.ncols(),
            op.n_a(),
            op.n_b()
        )));
    }
    let (n_a, n_b) = (op.n_a(), op.n_b());
    let l = op.num_terms();
    let (xl, tau, xr) = (x.left(), x.core(), x.right());

    // R G^l
    let mut rg = c.left() * (c.core() * (c.right().transpose() * &sketch.g_left));
    // R^T G^r
    let mut rtg = c.right() * (c.core().transpose() * (c.left().transpose() * &sketch.g_right));
    if x.rank() > 0 {
        for i in 0..l {
            let bg = op.apply_right(i, &sketch.g_left);
            rg -= op.apply_left(i, &(xl * (tau * (xr.transpose() * bg))));
            let ag = op.apply_left(i, &sketch.g_right);
            rtg -= op.apply_right(i, &(xr * (tau.transpose() * (xl.transpose() * ag))));
        }
    }
    if !rg.iter().chain(rtg.iter()).all(|v| v.is_finite_value()) {
        return Err(Error::NonFinite("randomized residual sketch"));
    }
    let (q, _) = thin_qr(&rg);
    let (w, _) = thin_qr(&rtg);

    let mut core = (q.transpose() * c.left()) * c.core() * (c.right().transpose() * &w);
    if x.rank() > 0 {
        for i in 0..l {
            let aq = op.apply_left(i, &q);
            let bw = op.apply_right(i, &w);
            core -= (aq.transpose() * xl) * tau * (xr.transpose() * bw);
        }
    }
    if core.is_empty() {
        return Ok(Truncated { value: LowRankTriple::zero(n_a, n_b), tail: T::zero() });
    }
    let svd = sorted_svd(&core);
    Ok(cut_svd_dense(&q, &w, &svd, params.tolrank, params.maxrank_r))
}

/// Residual compression strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualStrategy {
    #[default]
    Full,
    Dynamic,
    Randomized,
}

impl std::str::FromStr for ResidualStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "dynamic" => Ok(Self::Dynamic),
            "randomized" => Ok(Self::Randomized),
            other => Err(Error::InvalidParameter(format!(
                "unknown residual strategy `{other}` (expected full, dynamic or randomized)"
            ))),
        }
    }
}

impl std::fmt::Display for ResidualStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Dynamic => "dynamic",
            Self::Randomized => "randomized",
        })
    }
}

/// A residual strategy bound to its sketches, created once per solve.
#[derive(Debug, Clone)]
pub struct ResidualEvaluator<T: Scalar> {
    strategy: ResidualStrategy,
    sketch: Option<SketchPair<T>>,
}

impl<T: Scalar> ResidualEvaluator<T> {
    pub fn new(strategy: ResidualStrategy, n_a: usize, n_b: usize, params: &TruncationParams, seed: u64) -> Self {
        let sketch = (strategy == ResidualStrategy::Randomized)
            .then(|| SketchPair::new(n_a, n_b, params.maxrank_r, seed));
        Self { strategy, sketch }
    }

    pub fn strategy(&self) -> ResidualStrategy {
        self.strategy
    }

    pub fn evaluate(
        &self,
        op: &MultitermOperator<T>,
        c: &LowRankTriple<T>,
        x: &LowRankTriple<T>,
        params: &TruncationParams,
    ) -> Result<Truncated<T>> {
        match (&self.strategy, &self.sketch) {
            (ResidualStrategy::Full, _) => residual_full(op, c, x, params),
            (ResidualStrategy::Dynamic, _) => residual_dynamic(op, c, x, params),
            (ResidualStrategy::Randomized, Some(s)) => residual_randomized(op, c, x, s, params),
            (ResidualStrategy::Randomized, None) => unreachable!("sketch created with the evaluator"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::orthonormal_columns;
    use crate::sparse::SparseSymMatrix;
    use nalgebra::DVector;
    use rand::Rng;

    fn rd(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn triple(rng: &mut ChaCha8Rng, na: usize, nb: usize, r: usize) -> LowRankTriple<f64> {
        LowRankTriple::new(orthonormal_columns(&rd(rng, na, r)), rd(rng, r, r), orthonormal_columns(&rd(rng, nb, r)))
            .unwrap()
    }

    fn with_sigma(rng: &mut ChaCha8Rng, n: usize, sigma: &[f64]) -> BlockFactorization<f64> {
        let k = sigma.len();
        let u = orthonormal_columns(&rd(rng, n, k));
        let v = orthonormal_columns(&rd(rng, n, k));
        // Mix the factors so the input is not already in SVD form.
        let mix = orthonormal_columns(&rd(rng, k, k));
        let d = mix.transpose() * DMatrix::from_diagonal(&DVector::from_column_slice(sigma)) * &mix;
        BlockFactorization::new(vec![u * &mix], d, vec![v * mix]).unwrap()
    }

    fn random_sparse(rng: &mut ChaCha8Rng, n: usize) -> SparseSymMatrix<f64> {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, rng.random_range(1.0..3.0)));
            for j in 0..i {
                if rng.random::<f64>() < 0.25 {
                    t.push((i, j, rng.random_range(-0.5..0.5)));
                }
            }
        }
        SparseSymMatrix::from_triplets(n, &t).unwrap()
    }

    fn op(rng: &mut ChaCha8Rng, n: usize, l: usize) -> MultitermOperator<f64> {
        MultitermOperator::from_pairs((0..l).map(|_| (random_sparse(rng, n), random_sparse(rng, n))).collect())
            .unwrap()
    }

    #[test]
    fn params_validation() {
        assert!(TruncationParams::new(1e-12, 5).is_ok());
        assert_eq!(TruncationParams::new(1e-12, 5).unwrap().maxrank_r, 10);
        assert!(TruncationParams::new(0.0, 5).is_err());
        assert!(TruncationParams::new(1.0, 5).is_err());
        assert!(TruncationParams::new(1e-8, 0).is_err());
        assert!(TruncationParams::with_residual_cap(1e-8, 5, 4).is_err());
    }

    #[test]
    fn rank_one_orthonormal_input_is_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = LowRankTriple::new(
            orthonormal_columns(&rd(&mut rng, 9, 1)),
            DMatrix::from_element(1, 1, 1.0),
            orthonormal_columns(&rd(&mut rng, 7, 1)),
        )
        .unwrap();
        let p = TruncationParams::new(1e-12, 5).unwrap();
        let t = truncate_qrsvd(&x.as_blocks(), &p).unwrap();
        assert_eq!(t.value.rank(), 1);
        assert!((t.value.to_dense() - x.to_dense()).norm() < 1e-14);
        assert!((t.value.core()[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn tolrank_drops_tiny_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bf = with_sigma(&mut rng, 10, &[3.0, 2.0, 3e-13]);
        let t = truncate_with_cap(&bf, 1e-12, 5).unwrap();
        assert_eq!(t.value.rank(), 2);
        assert!((t.tail - 3e-13).abs() < 1e-14, "{}", t.tail);
        let err = (bf.to_dense() - t.value.to_dense()).norm();
        assert!((err - 3e-13).abs() < 1e-14, "{err}");
    }

    #[test]
    fn maxrank_caps_equal_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bf = with_sigma(&mut rng, 12, &[1.5; 7]);
        let t = truncate_with_cap(&bf, 1e-12, 4).unwrap();
        assert_eq!(t.value.rank(), 4);
        let err2 = (bf.to_dense() - t.value.to_dense()).norm_squared();
        assert!((err2 - 3.0 * 1.5 * 1.5).abs() < 1e-12);
    }

    #[test]
    fn zero_input_gives_rank_zero() {
        let bf = BlockFactorization::new(vec![DMatrix::<f64>::zeros(5, 2)], DMatrix::identity(2, 2), vec![
            DMatrix::zeros(4, 2),
        ])
        .unwrap();
        let t = truncate_with_cap(&bf, 1e-12, 3).unwrap();
        assert_eq!(t.value.rank(), 0);
        assert_eq!(t.tail, 0.0);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut l = DMatrix::<f64>::zeros(3, 1);
        l[(0, 0)] = f64::NAN;
        let bf = BlockFactorization::new(vec![l], DMatrix::identity(1, 1), vec![DMatrix::zeros(3, 1)]).unwrap();
        assert!(matches!(truncate_with_cap(&bf, 1e-12, 3), Err(Error::NonFinite(_))));
    }

    #[test]
    fn symmetric_truncation_keeps_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = orthonormal_columns(&rd(&mut rng, 8, 3));
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, -1.0, 1e-15]));
        let t = truncate_symmetric(&[&u], &d, 1e-12, 5).unwrap();
        assert_eq!(t.value.rank(), 2);
        assert_eq!(t.value.left(), t.value.right());
        let expect = &u * &d * u.transpose();
        assert!((t.value.to_dense() - expect).norm() < 1e-13);
    }

    #[test]
    fn full_residual_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let o = op(&mut rng, 16, 3);
        let c = triple(&mut rng, 16, 16, 1);
        let x = triple(&mut rng, 16, 16, 2);
        let p = TruncationParams::new(1e-12, 10).unwrap();
        let r = residual_full(&o, &c, &x, &p).unwrap();
        let dense = c.to_dense() - o.apply_dense(&x.to_dense());
        let err = (r.value.to_dense() - &dense).norm() / dense.norm();
        assert!(err <= 1e-13 + r.tail / dense.norm(), "{err}");
        let r0 = residual_full(&o, &c, &LowRankTriple::zero(16, 16), &p).unwrap();
        assert!((r0.value.to_dense() - c.to_dense()).norm() < 1e-14);
    }

    #[test]
    fn dynamic_matches_full_when_ranks_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let o = op(&mut rng, 16, 4);
        let c = triple(&mut rng, 16, 16, 1);
        let x = triple(&mut rng, 16, 16, 1);
        let p = TruncationParams::new(1e-14, 8).unwrap();
        let full = residual_full(&o, &c, &x, &p).unwrap().value.to_dense();
        let dynm = residual_dynamic(&o, &c, &x, &p).unwrap().value.to_dense();
        assert!((&full - &dynm).norm() <= 1e-10 * full.norm());
    }

    #[test]
    fn dynamic_of_rank_one_rhs_is_rhs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let o = op(&mut rng, 10, 3);
        let c = triple(&mut rng, 10, 10, 1);
        let p = TruncationParams::new(1e-12, 3).unwrap();
        let r = residual_dynamic(&o, &c, &LowRankTriple::zero(10, 10), &p).unwrap();
        assert_eq!(r.value.rank(), 1);
        assert!((r.value.to_dense() - c.to_dense()).norm() < 1e-14);
    }

    #[test]
    fn dynamic_cannot_beat_best_approximation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let o = op(&mut rng, 24, 6);
        let c = triple(&mut rng, 24, 24, 1);
        let x = triple(&mut rng, 24, 24, 2);
        let p = TruncationParams::with_residual_cap(1e-14, 2, 4).unwrap();
        let dense = c.to_dense() - o.apply_dense(&x.to_dense());
        let sv = sorted_svd(&dense).singular_values;
        let r = residual_dynamic(&o, &c, &x, &p).unwrap();
        assert!(r.value.rank() <= 4);
        let err = (r.value.to_dense() - &dense).norm();
        assert!(err >= sv[4] * (1.0 - 1e-12), "{err} < {}", sv[4]);
    }

    #[test]
    fn randomized_captures_exact_low_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let o = op(&mut rng, 20, 2);
        let c = triple(&mut rng, 20, 20, 1);
        let x = triple(&mut rng, 20, 20, 2);
        // Residual rank <= 1 + 2*2 = 5, sketch width 8.
        let p = TruncationParams::with_residual_cap(1e-14, 4, 8).unwrap();
        let sk = SketchPair::new(20, 20, 8, 42);
        let r = residual_randomized(&o, &c, &x, &sk, &p).unwrap();
        let dense = c.to_dense() - o.apply_dense(&x.to_dense());
        assert!((r.value.to_dense() - &dense).norm() <= 1e-8 * dense.norm());
        assert!(r.value.is_orthonormal());
        let again = residual_randomized(&o, &c, &x, &SketchPair::new(20, 20, 8, 42), &p).unwrap();
        assert_eq!(again.value, r.value);
    }

    #[test]
    fn randomized_of_rhs_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let o = op(&mut rng, 12, 3);
        let c = triple(&mut rng, 12, 12, 1);
        let p = TruncationParams::new(1e-12, 3).unwrap();
        let sk = SketchPair::new(12, 12, 6, 1);
        let r = residual_randomized(&o, &c, &LowRankTriple::zero(12, 12), &sk, &p).unwrap();
        assert_eq!(r.value.rank(), 1);
        assert!((r.value.to_dense() - c.to_dense()).norm() <= 1e-10 * c.to_dense().norm());
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("dynamic".parse::<ResidualStrategy>().unwrap(), ResidualStrategy::Dynamic);
        assert!("fast".parse::<ResidualStrategy>().is_err());
        assert_eq!(ResidualStrategy::Randomized.to_string(), "randomized");
    }
}
