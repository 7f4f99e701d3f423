//! Factored matrices and the multiterm operator acting on them.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::dense::{blkdiag, frobenius, hcat, orthonormality_defect, thin_qr};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sparse::SparseSymMatrix;

/// Orthonormality tolerance for factors of rank `r`: `max(1e-10, 1e4 eps) * sqrt(r)`.
pub fn orthonormality_tolerance<T: Scalar>(rank: usize) -> f64 {
    (1e4 * T::EPS).max(1e-10) * (rank.max(1) as f64).sqrt()
}

/// Low-rank matrix `X = X^l tau (X^r)^T` with column-orthonormal outer factors.
///
/// Rank zero is the zero matrix: `n_a x 0` and `n_b x 0` factors with an
/// empty core.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankTriple<T: Scalar> {
    left: DMatrix<T>,
    core: DMatrix<T>,
    right: DMatrix<T>,
}

impl<T: Scalar> LowRankTriple<T> {
    /// Wraps factors that are already column-orthonormal. Shapes and
    /// finiteness are checked; orthonormality is the caller's contract.
    pub fn new(left: DMatrix<T>, core: DMatrix<T>, right: DMatrix<T>) -> Result<Self> {
        let r = left.ncols();
        if right.ncols() != r || core.shape() != (r, r) {
            return Err(Error::Dimension(format!(
                "factors {}x{}, core {}x{}, right {}x{} do not form a rank-{r} triple",
                left.nrows(),
                left.ncols(),
                core.nrows(),
                core.ncols(),
                right.nrows(),
                right.ncols()
            )));
        }
        if !left.iter().chain(core.iter()).chain(right.iter()).all(|v| v.is_finite_value()) {
            return Err(Error::NonFinite("low-rank factors"));
        }
        Ok(Self { left, core, right })
    }

    pub(crate) fn from_parts_unchecked(left: DMatrix<T>, core: DMatrix<T>, right: DMatrix<T>) -> Self {
        debug_assert_eq!(left.ncols(), core.nrows());
        debug_assert_eq!(right.ncols(), core.ncols());
        Self { left, core, right }
    }

    pub fn zero(n_a: usize, n_b: usize) -> Self {
        Self {
            left: DMatrix::zeros(n_a, 0),
            core: DMatrix::zeros(0, 0),
            right: DMatrix::zeros(n_b, 0),
        }
    }

    /// Builds `C1 core C2^T` from arbitrary (not necessarily orthonormal)
    /// outer factors by thin QR on each side. No rank is dropped.
    pub fn from_outer(c1: &DMatrix<T>, core: &DMatrix<T>, c2: &DMatrix<T>) -> Result<Self> {
        if core.shape() != (c1.ncols(), c2.ncols()) {
            return Err(Error::Dimension(format!(
                "core {}x{} does not match outer widths {} and {}",
                core.nrows(),
                core.ncols(),
                c1.ncols(),
                c2.ncols()
            )));
        }
        if c1.ncols() == 0 || c2.ncols() == 0 {
            return Ok(Self::zero(c1.nrows(), c2.nrows()));
        }
        let (ql, rl) = thin_qr(c1);
        let (qr, rr) = thin_qr(c2);
        let mid = &rl * core * rr.transpose();
        let k = mid.nrows().max(mid.ncols());
        // Pad the short side so the core stays square.
        let (ql, qr, mid) = if mid.nrows() == mid.ncols() {
            (ql, qr, mid)
        } else {
            let ql = pad_orthonormal(ql, k)?;
            let qr = pad_orthonormal(qr, k)?;
            let mut m = DMatrix::zeros(k, k);
            m.view_mut((0, 0), mid.shape()).copy_from(&mid);
            (ql, qr, m)
        };
        Self::new(ql, mid, qr)
    }

    pub fn n_a(&self) -> usize {
        self.left.nrows()
    }

    pub fn n_b(&self) -> usize {
        self.right.nrows()
    }

    pub fn rank(&self) -> usize {
        self.core.nrows()
    }

    pub fn left(&self) -> &DMatrix<T> {
        &self.left
    }

    pub fn core(&self) -> &DMatrix<T> {
        &self.core
    }

    pub fn right(&self) -> &DMatrix<T> {
        &self.right
    }

    pub fn into_parts(self) -> (DMatrix<T>, DMatrix<T>, DMatrix<T>) {
        (self.left, self.core, self.right)
    }

    /// Dense `n_a x n_b` matrix. Test and oracle use only.
    pub fn to_dense(&self) -> DMatrix<T> {
        if self.rank() == 0 {
            return DMatrix::zeros(self.n_a(), self.n_b());
        }
        &self.left * &self.core * self.right.transpose()
    }

    /// Largest of the two factor orthonormality defects.
    pub fn orthonormality_defect(&self) -> T {
        orthonormality_defect(&self.left).max(orthonormality_defect(&self.right))
    }

    pub fn is_orthonormal(&self) -> bool {
        self.orthonormality_defect().to_f64_lossy() <= orthonormality_tolerance::<T>(self.rank())
    }

    pub fn transpose(&self) -> Self {
        Self {
            left: self.right.clone(),
            core: self.core.transpose(),
            right: self.left.clone(),
        }
    }

    pub fn scaled(&self, s: T) -> Self {
        Self {
            left: self.left.clone(),
            core: &self.core * s,
            right: self.right.clone(),
        }
    }

    /// Same matrix viewed as a (single block) lazy factorization.
    pub fn as_blocks(&self) -> BlockFactorization<T> {
        BlockFactorization {
            left: vec![self.left.clone()],
            core: self.core.clone(),
            right: vec![self.right.clone()],
        }
    }

    /// Writes the text checkpoint format.
    ///
    /// ```text
    /// sscg-lowrank 1
    /// <n_a> <n_b> <rank>
    /// <left, column-major, one value per line>
    /// <core, column-major>
    /// <right, column-major>
    /// ```
    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        let mut s = String::with_capacity(24 * (self.left.len() + self.core.len() + self.right.len()) + 64);
        s.push_str("sscg-lowrank 1\n");
        s.push_str(&format!("{} {} {}\n", self.n_a(), self.n_b(), self.rank()));
        for v in self.left.iter().chain(self.core.iter()).chain(self.right.iter()) {
            s.push_str(&format!("{v:e}\n"));
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_checkpoint(&text, path)
    }

    pub fn parse_checkpoint(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        match lines.next() {
            Some((_, "sscg-lowrank 1")) => {}
            _ => return Err(Error::parse(path, "line 1: expected `sscg-lowrank 1`")),
        }
        let (ln, dims) = lines.next().ok_or_else(|| Error::parse(path, "missing dimension line"))?;
        let dims: Vec<usize> = dims
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(path, format!("line {ln}: invalid dimension line")))?;
        let [n_a, n_b, r] = dims[..] else {
            return Err(Error::parse(path, format!("line {ln}: expected `n_a n_b rank`")));
        };
        let mut values = Vec::with_capacity((n_a + n_b + r) * r);
        for (ln, l) in lines.filter(|(_, l)| !l.is_empty()) {
            let v: f64 = l
                .parse()
                .map_err(|_| Error::parse(path, format!("line {ln}: invalid number `{l}`")))?;
            values.push(T::lit(v));
        }
        let expected = (n_a + n_b + r) * r;
        if values.len() != expected {
            return Err(Error::parse(path, format!("expected {expected} values, found {}", values.len())));
        }
        let left = DMatrix::from_column_slice(n_a, r, &values[..n_a * r]);
        let core = DMatrix::from_column_slice(r, r, &values[n_a * r..(n_a + r) * r]);
        let right = DMatrix::from_column_slice(n_b, r, &values[(n_a + r) * r..]);
        let x = Self::new(left, core, right)?;
        if x.orthonormality_defect().to_f64_lossy() > 1e-6 {
            return Err(Error::parse(path, "factors are not column-orthonormal"));
        }
        Ok(x)
    }
}

fn pad_orthonormal<T: Scalar>(q: DMatrix<T>, k: usize) -> Result<DMatrix<T>> {
    let (n, c) = q.shape();
    if c >= k {
        return Ok(q);
    }
    if k > n {
        return Err(Error::Dimension(format!("cannot extend {n}x{c} basis to {k} columns")));
    }
    // Complete the basis with the most orthogonal coordinate directions.
    let mut out = q;
    while out.ncols() < k {
        let proj = &out * out.transpose();
        let best = (0..n)
            .min_by(|&a, &b| proj[(a, a)].partial_cmp(&proj[(b, b)]).unwrap_or(std::cmp::Ordering::Equal))
            .expect("nonempty");
        let mut e = DMatrix::zeros(n, 1);
        e[(best, 0)] = T::one();
        let w = &e - &out * (out.transpose() * &e);
        let nrm = w.norm();
        let col = w / nrm;
        out = hcat(n, &[&out, &col]);
    }
    Ok(out)
}

/// Lazy product `[L_1, .., L_m] D [R_1, .., R_m]^T`.
///
/// Nothing of size `n_a x n_b` is ever formed from it outside tests.
#[derive(Debug, Clone)]
pub struct BlockFactorization<T: Scalar> {
    left: Vec<DMatrix<T>>,
    core: DMatrix<T>,
    right: Vec<DMatrix<T>>,
}

impl<T: Scalar> BlockFactorization<T> {
    pub fn new(left: Vec<DMatrix<T>>, core: DMatrix<T>, right: Vec<DMatrix<T>>) -> Result<Self> {
        let wl: usize = left.iter().map(|b| b.ncols()).sum();
        let wr: usize = right.iter().map(|b| b.ncols()).sum();
        if wl != core.nrows() || wr != core.ncols() {
            return Err(Error::Dimension(format!(
                "block widths {wl} and {wr} do not match core {}x{}",
                core.nrows(),
                core.ncols()
            )));
        }
        if left.windows(2).any(|w| w[0].nrows() != w[1].nrows())
            || right.windows(2).any(|w| w[0].nrows() != w[1].nrows())
        {
            return Err(Error::Dimension("blocks have differing row counts".into()));
        }
        Ok(Self { left, core, right })
    }

    /// `sum_j L_j D_j R_j^T` with a block-diagonal core.
    pub fn from_terms(n_a: usize, n_b: usize, terms: Vec<(DMatrix<T>, DMatrix<T>, DMatrix<T>)>) -> Result<Self> {
        let mut left = Vec::with_capacity(terms.len() + 1);
        let mut right = Vec::with_capacity(terms.len() + 1);
        let mut cores = Vec::with_capacity(terms.len());
        for (l, d, r) in terms {
            if l.nrows() != n_a || r.nrows() != n_b || d.shape() != (l.ncols(), r.ncols()) {
                return Err(Error::Dimension("term factors do not conform".into()));
            }
            left.push(l);
            right.push(r);
            cores.push(d);
        }
        // Keep the row count known even with no blocks.
        left.push(DMatrix::zeros(n_a, 0));
        right.push(DMatrix::zeros(n_b, 0));
        let refs: Vec<&DMatrix<T>> = cores.iter().collect();
        Self::new(left, blkdiag(&refs), right)
    }

    pub fn n_a(&self) -> usize {
        self.left.first().map_or(0, |b| b.nrows())
    }

    pub fn n_b(&self) -> usize {
        self.right.first().map_or(0, |b| b.nrows())
    }

    pub fn width(&self) -> usize {
        self.core.nrows().max(self.core.ncols())
    }

    pub fn left_blocks(&self) -> &[DMatrix<T>] {
        &self.left
    }

    pub fn right_blocks(&self) -> &[DMatrix<T>] {
        &self.right
    }

    pub fn core(&self) -> &DMatrix<T> {
        &self.core
    }

    pub fn left_stacked(&self) -> DMatrix<T> {
        let refs: Vec<&DMatrix<T>> = self.left.iter().collect();
        hcat(self.n_a(), &refs)
    }

    pub fn right_stacked(&self) -> DMatrix<T> {
        let refs: Vec<&DMatrix<T>> = self.right.iter().collect();
        hcat(self.n_b(), &refs)
    }

    pub fn is_finite(&self) -> bool {
        self.left
            .iter()
            .chain(self.right.iter())
            .chain(std::iter::once(&self.core))
            .all(|m| m.iter().all(|v| v.is_finite_value()))
    }

    /// Dense reconstruction. Test and oracle use only.
    pub fn to_dense(&self) -> DMatrix<T> {
        self.left_stacked() * &self.core * self.right_stacked().transpose()
    }
}

/// `L(X) = sum_i A_i X B_i` with sparse symmetric coefficients.
#[derive(Debug, Clone)]
pub struct MultitermOperator<T: Scalar> {
    terms: Vec<Term<T>>,
    n_a: usize,
    n_b: usize,
    symmetric: bool,
}

#[derive(Debug, Clone)]
struct Term<T: Scalar> {
    a: Arc<SparseSymMatrix<T>>,
    b: Arc<SparseSymMatrix<T>>,
    a_identity: bool,
    b_identity: bool,
}

impl<T: Scalar> MultitermOperator<T> {
    pub fn new(pairs: Vec<(Arc<SparseSymMatrix<T>>, Arc<SparseSymMatrix<T>>)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidParameter("operator needs at least one term".into()));
        }
        let n_a = pairs[0].0.dim();
        let n_b = pairs[0].1.dim();
        for (i, (a, b)) in pairs.iter().enumerate() {
            if a.dim() != n_a {
                return Err(Error::TermDimension {
                    term: i + 1,
                    detail: format!("left matrix is {0}x{0}, expected {n_a}x{n_a}", a.dim()),
                });
            }
            if b.dim() != n_b {
                return Err(Error::TermDimension {
                    term: i + 1,
                    detail: format!("right matrix is {0}x{0}, expected {n_b}x{n_b}", b.dim()),
                });
            }
        }
        let symmetric = n_a == n_b && pairing_is_symmetric(&pairs);
        let terms = pairs
            .into_iter()
            .map(|(a, b)| Term { a_identity: a.is_identity(), b_identity: b.is_identity(), a, b })
            .collect();
        Ok(Self { terms, n_a, n_b, symmetric })
    }

    pub fn from_pairs(pairs: Vec<(SparseSymMatrix<T>, SparseSymMatrix<T>)>) -> Result<Self> {
        Self::new(pairs.into_iter().map(|(a, b)| (Arc::new(a), Arc::new(b))).collect())
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn n_a(&self) -> usize {
        self.n_a
    }

    pub fn n_b(&self) -> usize {
        self.n_b
    }

    /// True when `L(X)^T = L(X^T)` holds for the stored terms.
    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn left_matrix(&self, i: usize) -> &SparseSymMatrix<T> {
        &self.terms[i].a
    }

    pub fn right_matrix(&self, i: usize) -> &SparseSymMatrix<T> {
        &self.terms[i].b
    }

    pub fn pairs(&self) -> Vec<(Arc<SparseSymMatrix<T>>, Arc<SparseSymMatrix<T>>)> {
        self.terms.iter().map(|t| (t.a.clone(), t.b.clone())).collect()
    }

    /// `A_i M`, skipping identity matrices.
    pub fn apply_left(&self, i: usize, m: &DMatrix<T>) -> DMatrix<T> {
        let t = &self.terms[i];
        if t.a_identity {
            m.clone()
        } else {
            t.a.mul_dense(m)
        }
    }

    /// `B_i M`, skipping identity matrices.
    pub fn apply_right(&self, i: usize, m: &DMatrix<T>) -> DMatrix<T> {
        let t = &self.terms[i];
        if t.b_identity {
            m.clone()
        } else {
            t.b.mul_dense(m)
        }
    }

    /// Dense `sum_i A_i X B_i`. Test and oracle use only.
    pub fn apply_dense(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let mut out = DMatrix::zeros(self.n_a, self.n_b);
        for i in 0..self.terms.len() {
            let ax = self.apply_left(i, x);
            out += self.apply_right(i, &ax.transpose()).transpose();
        }
        out
    }

    /// Dense Kronecker matrix `sum_i B_i (x) A_i`. Oracle use only.
    pub fn kronecker_dense(&self) -> DMatrix<T> {
        let mut k = DMatrix::zeros(self.n_a * self.n_b, self.n_a * self.n_b);
        for t in &self.terms {
            k += t.b.to_dense().kronecker(&t.a.to_dense());
        }
        k
    }

    fn check_triple(&self, x: &LowRankTriple<T>) -> Result<()> {
        for (i, t) in self.terms.iter().enumerate() {
            if t.a.dim() != x.n_a() || t.b.dim() != x.n_b() {
                return Err(Error::TermDimension {
                    term: i + 1,
                    detail: format!(
                        "operator term is {}x{} by {}x{}, iterate is {}x{}",
                        t.a.dim(),
                        t.a.dim(),
                        t.b.dim(),
                        t.b.dim(),
                        x.n_a(),
                        x.n_b()
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Every `(A, B)` pair has a matching `(B, A)` pair (counting multiplicity).
fn pairing_is_symmetric<T: Scalar>(pairs: &[(Arc<SparseSymMatrix<T>>, Arc<SparseSymMatrix<T>>)]) -> bool {
    let mut used = vec![false; pairs.len()];
    for i in 0..pairs.len() {
        if used[i] {
            continue;
        }
        let (a, b) = &pairs[i];
        if a.same_as(b) {
            used[i] = true;
            continue;
        }
        let partner = (i + 1..pairs.len()).find(|&j| !used[j] && pairs[j].0.same_as(b) && pairs[j].1.same_as(a));
        match partner {
            Some(j) => {
                used[i] = true;
                used[j] = true;
            }
            None => return false,
        }
    }
    true
}

/// `L(X)` as the lazy blocks `[A_i X^l] blkdiag(tau, ..) [B_i X^r]`.
pub fn apply_operator_factored<T: Scalar>(
    op: &MultitermOperator<T>,
    x: &LowRankTriple<T>,
) -> Result<BlockFactorization<T>> {
    op.check_triple(x)?;
    let l = op.num_terms();
    let left = (0..l).map(|i| op.apply_left(i, x.left())).collect();
    let right = (0..l).map(|i| op.apply_right(i, x.right())).collect();
    let cores: Vec<&DMatrix<T>> = std::iter::repeat(x.core()).take(l).collect();
    BlockFactorization::new(left, blkdiag(&cores), right)
}

fn check_same_shape<T: Scalar>(x: &LowRankTriple<T>, y: &LowRankTriple<T>) -> Result<()> {
    if x.n_a() != y.n_a() || x.n_b() != y.n_b() {
        return Err(Error::Dimension(format!(
            "{}x{} and {}x{} matrices",
            x.n_a(),
            x.n_b(),
            y.n_a(),
            y.n_b()
        )));
    }
    Ok(())
}

/// `trace(X^T Y)` from the factors.
pub fn inner_product_factored<T: Scalar>(x: &LowRankTriple<T>, y: &LowRankTriple<T>) -> Result<T> {
    check_same_shape(x, y)?;
    if x.rank() == 0 || y.rank() == 0 {
        return Ok(T::zero());
    }
    Ok(factored_trace(x.left(), x.core(), x.right(), y.left(), y.core(), y.right()))
}

/// `trace((L1 D1 R1^T)^T L2 D2 R2^T)` via small products.
pub(crate) fn factored_trace<T: Scalar>(
    l1: &DMatrix<T>,
    d1: &DMatrix<T>,
    r1: &DMatrix<T>,
    l2: &DMatrix<T>,
    d2: &DMatrix<T>,
    r2: &DMatrix<T>,
) -> T {
    let ll = l1.transpose() * l2;
    let rr = r2.transpose() * r1;
    let m = ll * d2 * rr;
    d1.dot(&m)
}

/// `||X||_F = ||tau||_F` for orthonormal factors.
pub fn frob_norm_factored<T: Scalar>(x: &LowRankTriple<T>) -> T {
    frobenius(x.core())
}

/// `||X_next - X_prev||_F / ||X_next||_F` from the trace expansion.
pub fn relative_change<T: Scalar>(x_prev: &LowRankTriple<T>, x_next: &LowRankTriple<T>) -> Result<T> {
    check_same_shape(x_prev, x_next)?;
    let nn = frob_norm_factored(x_next);
    if x_next.rank() == 0 || nn == T::zero() {
        return Err(Error::ZeroIterate);
    }
    let np = frob_norm_factored(x_prev);
    let cross = inner_product_factored(x_prev, x_next)?;
    let sq = nn * nn + np * np - cross * T::lit(2.0);
    Ok(sq.max(T::zero()).sqrt() / nn)
}

/// Below this value the trace expansion has lost too many digits to
/// cancellation and [`stopping_change`] recomputes the difference.
pub const TRACE_FORMULA_FLOOR: f64 = 1e-4;

/// `||X_next - X_prev||_F / ||X_next||_F` from the stacked factors
/// `[X_next^l, X_prev^l] blkdiag(tau_next, -tau_prev) [X_next^r, X_prev^r]^T`,
/// accurate down to machine precision.
pub fn relative_change_exact<T: Scalar>(x_prev: &LowRankTriple<T>, x_next: &LowRankTriple<T>) -> Result<T> {
    check_same_shape(x_prev, x_next)?;
    let nn = frob_norm_factored(x_next);
    if x_next.rank() == 0 || nn == T::zero() {
        return Err(Error::ZeroIterate);
    }
    if x_prev.rank() == 0 {
        return Ok(T::one());
    }
    let (n_a, n_b) = (x_next.n_a(), x_next.n_b());
    let (_, rl) = thin_qr(&hcat(n_a, &[x_next.left(), x_prev.left()]));
    let (_, rr) = thin_qr(&hcat(n_b, &[x_next.right(), x_prev.right()]));
    let neg = -x_prev.core();
    let diff = rl * blkdiag(&[x_next.core(), &neg]) * rr.transpose();
    Ok(frobenius(&diff) / nn)
}

/// Relative change used by the solvers' stopping test: the trace expansion,
/// switching to [`relative_change_exact`] when the expansion drops below
/// [`TRACE_FORMULA_FLOOR`].
pub fn stopping_change<T: Scalar>(x_prev: &LowRankTriple<T>, x_next: &LowRankTriple<T>) -> Result<T> {
    let fast = relative_change(x_prev, x_next)?;
    if fast.to_f64_lossy() >= TRACE_FORMULA_FLOOR {
        return Ok(fast);
    }
    relative_change_exact(x_prev, x_next)
}
