//! Test problems, the dense Kronecker oracle and block-Krylov bases.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dense::{thin_qr, unvec, vec_of};
use crate::error::{Error, Result};
use crate::lowrank::{LowRankTriple, MultitermOperator};
use crate::matrix_market;
use crate::scalar::Scalar;
use crate::sparse::SparseSymMatrix;

/// Largest `n_A * n_B` the dense oracle accepts.
pub const ORACLE_CAP: usize = 10_000;

#[derive(Debug, Clone)]
pub struct ProblemInstance<T: Scalar> {
    pub name: String,
    pub operator: MultitermOperator<T>,
    /// `C = C_1 C_2^T`.
    pub rhs: LowRankTriple<T>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaKind {
    Sin,
    Exp,
}

impl GammaKind {
    fn eval(self, z: f64) -> f64 {
        match self {
            Self::Sin => (z * PI).sin(),
            Self::Exp => (z * PI).exp(),
        }
    }
}

impl std::str::FromStr for GammaKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sin" => Ok(Self::Sin),
            "exp" => Ok(Self::Exp),
            other => Err(Error::InvalidParameter(format!("unknown gamma `{other}` (expected sin or exp)"))),
        }
    }
}

impl std::fmt::Display for GammaKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sin => "sin",
            Self::Exp => "exp",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decay {
    Fast,
    Slow,
}

impl Decay {
    fn lambda(self, j: usize) -> f64 {
        match self {
            Self::Fast => (j as f64).powi(-2),
            Self::Slow => 1.0 / j as f64,
        }
    }
}

impl std::str::FromStr for Decay {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Self::Fast),
            "slow" => Ok(Self::Slow),
            other => Err(Error::InvalidParameter(format!("unknown decay `{other}` (expected fast or slow)"))),
        }
    }
}

impl std::fmt::Display for Decay {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fast => "fast",
            Self::Slow => "slow",
        })
    }
}

fn ones<T: Scalar>(n: usize, scale: f64) -> DMatrix<T> {
    DMatrix::from_element(n, 1, T::lit(scale))
}

/// `(1/h^2) tridiag(theta(x_{i-1/2}), -(theta(x_{i-1/2}) + theta(x_{i+1/2})), theta(x_{i+1/2}))`
/// with `theta(z) = -exp(-z)/10`.
pub fn diffusion_matrix<T: Scalar>(n: usize) -> SparseSymMatrix<T> {
    let h = 1.0 / (n + 1) as f64;
    let theta = |z: f64| -0.1 * (-z).exp();
    let diag: Vec<T> = (1..=n)
        .map(|i| {
            let x = i as f64 * h;
            T::lit(-(theta(x - 0.5 * h) + theta(x + 0.5 * h)) / (h * h))
        })
        .collect();
    let off: Vec<T> = (1..n).map(|i| T::lit(theta((i as f64 + 0.5) * h) / (h * h))).collect();
    SparseSymMatrix::tridiagonal(&diag, &off).expect("consistent tridiagonal lengths")
}

/// `A X + X A + M X M = 1 1^T` from the variable-coefficient
/// diffusion-reaction problem on the unit square, `n` interior nodes per side.
pub fn gen_diffusion_reaction<T: Scalar>(n: usize, gamma: GammaKind) -> Result<ProblemInstance<T>> {
    if n < 3 {
        return Err(Error::InvalidParameter(format!("grid count must be at least 3, got {n}")));
    }
    let h = 1.0 / (n + 1) as f64;
    let a = Arc::new(diffusion_matrix::<T>(n));
    let i = Arc::new(SparseSymMatrix::identity(n));
    let g: Vec<T> = (1..=n).map(|k| T::lit(gamma.eval(k as f64 * h))).collect();
    let m = Arc::new(SparseSymMatrix::diagonal(&g));
    let operator = MultitermOperator::new(vec![(a.clone(), i.clone()), (i, a), (m.clone(), m)])?;
    let rhs = LowRankTriple::from_outer(&ones(n, 1.0), &DMatrix::identity(1, 1), &ones(n, 1.0))?;
    let metadata = BTreeMap::from([
        ("generator".into(), "diffusion_reaction".into()),
        ("n".into(), n.to_string()),
        ("gamma".into(), gamma.to_string()),
    ]);
    Ok(ProblemInstance { name: format!("diffusion_reaction_{gamma}_{n}"), operator, rhs, metadata })
}

/// Five-point Laplacian on an `p x q` interior grid of the unit square, with
/// lexicographic ordering `i + p j`.
pub fn laplacian_2d<T: Scalar>(p: usize, q: usize) -> SparseSymMatrix<T> {
    let hx = 1.0 / (p + 1) as f64;
    let hy = 1.0 / (q + 1) as f64;
    let (cx, cy) = (1.0 / (hx * hx), 1.0 / (hy * hy));
    let mut t = Vec::with_capacity(5 * p * q);
    for j in 0..q {
        for i in 0..p {
            let k = i + p * j;
            t.push((k, k, T::lit(2.0 * (cx + cy))));
            if i + 1 < p {
                t.push((k, k + 1, T::lit(-cx)));
                t.push((k + 1, k, T::lit(-cx)));
            }
            if j + 1 < q {
                t.push((k, k + p, T::lit(-cy)));
                t.push((k + p, k, T::lit(-cy)));
            }
        }
    }
    SparseSymMatrix::from_triplets(p * q, &t).expect("indices inside grid")
}

/// Heat problem with a Robin-type boundary term: `A X + X A + M X M = C`.
///
/// `A` is the five-point Laplacian on `n0^2` nodes and `M = N N^T` with
/// `N = sqrt(delta / h)` times the selector of the `n0` nodes next to the
/// `x = 1` side, so `M` has rank `n0`. `C` is the normalized all-ones
/// rank-one matrix.
pub fn gen_heat1<T: Scalar>(n0: usize, delta: f64) -> Result<ProblemInstance<T>> {
    if n0 < 3 {
        return Err(Error::InvalidParameter(format!("grid side must be at least 3, got {n0}")));
    }
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::InvalidParameter(format!("delta must be positive, got {delta}")));
    }
    let n = n0 * n0;
    let h = 1.0 / (n0 + 1) as f64;
    let a = Arc::new(laplacian_2d::<T>(n0, n0));
    let i = Arc::new(SparseSymMatrix::identity(n));
    let w = T::lit(delta / h);
    let robin: Vec<(usize, usize, T)> = (0..n0).map(|j| (n0 - 1 + n0 * j, n0 - 1 + n0 * j, w)).collect();
    let m = Arc::new(SparseSymMatrix::from_triplets(n, &robin)?);
    let operator = MultitermOperator::new(vec![(a.clone(), i.clone()), (i, a), (m.clone(), m)])?;
    let s = 1.0 / (n as f64).sqrt();
    let rhs = LowRankTriple::from_outer(&ones(n, s), &DMatrix::identity(1, 1), &ones(n, s))?;
    let metadata = BTreeMap::from([
        ("generator".into(), "heat1".into()),
        ("n0".into(), n0.to_string()),
        ("delta".into(), delta.to_string()),
    ]);
    Ok(ProblemInstance { name: format!("heat1_{delta}_{n0}"), operator, rhs, metadata })
}

/// Most nearly square factorization `p * q = n` with `p <= q`.
fn grid_shape(n: usize) -> (usize, usize) {
    let mut p = (n as f64).sqrt() as usize;
    while p > 1 && n % p != 0 {
        p -= 1;
    }
    let p = p.max(1);
    (p, n / p)
}

/// Edge-weighted five-point operator with weights `w(x, y)` in `[-1, 1]`
/// sampled at edge midpoints, so `|x^T K x| <= x^T A_1 x` for the unweighted
/// Laplacian `A_1` on the same grid.
fn weighted_laplacian<T: Scalar>(p: usize, q: usize, w: impl Fn(f64, f64) -> f64) -> SparseSymMatrix<T> {
    let hx = 1.0 / (p + 1) as f64;
    let hy = 1.0 / (q + 1) as f64;
    let (cx, cy) = (1.0 / (hx * hx), 1.0 / (hy * hy));
    let mut diag = vec![0.0; p * q];
    let mut t = Vec::with_capacity(5 * p * q);
    for j in 0..q {
        for i in 0..p {
            let k = i + p * j;
            let (x, y) = ((i + 1) as f64 * hx, (j + 1) as f64 * hy);
            // Edge to the left/bottom neighbour, or to the boundary.
            let wl = cx * w(x - 0.5 * hx, y);
            let wb = cy * w(x, y - 0.5 * hy);
            diag[k] += wl + wb;
            if i > 0 {
                diag[k - 1] += wl;
                t.push((k, k - 1, T::lit(-wl)));
                t.push((k - 1, k, T::lit(-wl)));
            }
            if j > 0 {
                diag[k - p] += wb;
                t.push((k, k - p, T::lit(-wb)));
                t.push((k - p, k, T::lit(-wb)));
            }
            if i + 1 == p {
                diag[k] += cx * w(x + 0.5 * hx, y);
            }
            if j + 1 == q {
                diag[k] += cy * w(x, y + 0.5 * hy);
            }
        }
    }
    t.extend(diag.iter().enumerate().map(|(k, &d)| (k, k, T::lit(d))));
    SparseSymMatrix::from_triplets(p * q, &t).expect("indices inside grid")
}

/// Stochastic-Galerkin-like operator `A_1 X + sum_{j>=2} A_j X B_j = f_0 e_1^T`.
///
/// `A_1` is the Laplacian on a near-square grid with `n_a` nodes. Each
/// `A_j = sigma sqrt(lambda_j) K_j` with `K_j` an edge-weighted Laplacian
/// whose weights are a random separable cosine mode, and `lambda_j = j^-2`
/// (fast) or `j^-1` (slow). `B_1 = I` and `B_j` is a symmetric tridiagonal
/// moment matrix with zero diagonal. Positive definiteness follows from
/// `sum_j sigma sqrt(lambda_j) ||B_j|| < 1`, which is checked.
pub fn gen_synthetic_kl<T: Scalar>(
    n_a: usize,
    n_b: usize,
    terms: usize,
    decay: Decay,
    sigma: f64,
    seed: u64,
) -> Result<ProblemInstance<T>> {
    if terms < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 terms, got {terms}")));
    }
    if n_a < 2 || n_b < 2 {
        return Err(Error::InvalidParameter(format!("sizes must be at least 2, got {n_a} and {n_b}")));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p, q) = grid_shape(n_a);
    let a1 = Arc::new(laplacian_2d::<T>(p, q));
    let mut pairs = vec![(a1, Arc::new(SparseSymMatrix::identity(n_b)))];
    let mut bound = 0.0;
    for j in 2..=terms {
        let scale = sigma * decay.lambda(j).sqrt();
        let (kx, ky) = (rng.random_range(1..=4) as f64, rng.random_range(1..=4) as f64);
        let (px, py) = (rng.random_range(0.0..PI), rng.random_range(0.0..PI));
        let k = weighted_laplacian::<T>(p, q, |x, y| (PI * kx * x + px).cos() * (PI * ky * y + py).cos());
        let off: Vec<T> = (1..n_b)
            .map(|i| {
                let c = i as f64 / (4.0 * (i * i) as f64 - 1.0).sqrt();
                T::lit(c * rng.random_range(0.5..1.0))
            })
            .collect();
        let b = SparseSymMatrix::tridiagonal(&vec![T::zero(); n_b], &off)?;
        bound += scale * b.norm_bound().to_f64_lossy();
        pairs.push((Arc::new(k.scaled(T::lit(scale))), Arc::new(b)));
    }
    if bound >= 1.0 {
        return Err(Error::NotSpd(format!(
            "perturbation bound {bound:.3} is not below 1; choose a smaller sigma than {sigma}"
        )));
    }
    let operator = MultitermOperator::new(pairs)?;
    let mut e1 = DMatrix::zeros(n_b, 1);
    e1[0] = T::one();
    let rhs = LowRankTriple::from_outer(&ones(n_a, 1.0), &DMatrix::identity(1, 1), &e1)?;
    let metadata = BTreeMap::from([
        ("generator".into(), "synthetic_kl".into()),
        ("n_a".into(), n_a.to_string()),
        ("n_b".into(), n_b.to_string()),
        ("terms".into(), terms.to_string()),
        ("decay".into(), decay.to_string()),
        ("sigma".into(), sigma.to_string()),
        ("seed".into(), seed.to_string()),
        ("grid".into(), format!("{p}x{q}")),
    ]);
    Ok(ProblemInstance { name: format!("synthetic_kl_{decay}_{terms}_{n_a}x{n_b}"), operator, rhs, metadata })
}

/// Dense solve of `sum_i (B_i (x) A_i) vec(X) = vec(C)`.
pub fn dense_kron_solve<T: Scalar>(p: &ProblemInstance<T>) -> Result<DMatrix<T>> {
    dense_kron_solve_op(&p.operator, &p.rhs)
}

pub fn dense_kron_solve_op<T: Scalar>(op: &MultitermOperator<T>, c: &LowRankTriple<T>) -> Result<DMatrix<T>> {
    let size = op.n_a() * op.n_b();
    if size > ORACLE_CAP {
        return Err(Error::OracleTooLarge { size, cap: ORACLE_CAP });
    }
    let k = op.kronecker_dense();
    let b = vec_of(&c.to_dense());
    let sol: DVector<T> = match k.clone().cholesky() {
        Some(ch) => ch.solve(&b),
        None => k
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Singular("Kronecker matrix of the operator".into()))?,
    };
    if !sol.iter().all(|v| v.is_finite_value()) {
        return Err(Error::Singular("Kronecker solve produced non-finite values".into()));
    }
    Ok(unvec(&sol, op.n_a(), op.n_b()))
}

/// Orthonormal basis of `range([R0, A_* R0, ..., A_*^k R0])` where `A_* V`
/// stacks `A_i V` over the given matrices.
///
/// Each level applies every matrix to the directions that were new at the
/// previous level. A direction is kept when its norm after two projection
/// sweeps exceeds `1e-10` of its norm before projection.
pub fn build_subspace_from<T: Scalar>(mats: &[&SparseSymMatrix<T>], r0: &DMatrix<T>, k: usize) -> DMatrix<T> {
    let n = r0.nrows();
    let mut basis: Vec<DVector<T>> = Vec::new();
    let add = |basis: &mut Vec<DVector<T>>, v: DVector<T>| -> Option<DVector<T>> {
        let before = v.norm();
        if before == T::zero() {
            return None;
        }
        let mut w = v;
        for _ in 0..2 {
            for q in basis.iter() {
                let c = q.dot(&w);
                w.axpy(-c, q, T::one());
            }
        }
        let after = w.norm();
        if after <= T::lit(1e-10) * before {
            return None;
        }
        w /= after;
        basis.push(w.clone());
        Some(w)
    };
    let mut frontier: Vec<DVector<T>> = r0.column_iter().filter_map(|c| add(&mut basis, c.clone_owned())).collect();
    for _ in 0..k {
        let mut next = Vec::new();
        for m in mats {
            for v in &frontier {
                let mut y = vec![T::zero(); n];
                m.mul_vec(v.as_slice(), &mut y);
                if let Some(w) = add(&mut basis, DVector::from_vec(y)) {
                    next.push(w);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    let mut out = DMatrix::zeros(n, basis.len());
    for (j, q) in basis.iter().enumerate() {
        out.set_column(j, q);
    }
    out
}

/// Left-side basis of the block Krylov-like space `K_k(A_*, R0)`.
pub fn build_subspace<T: Scalar>(op: &MultitermOperator<T>, r0: &DMatrix<T>, k: usize) -> DMatrix<T> {
    let mats: Vec<&SparseSymMatrix<T>> = (0..op.num_terms()).map(|i| op.left_matrix(i)).collect();
    build_subspace_from(&mats, r0, k)
}

/// Right-side counterpart of [`build_subspace`], built from the `B_i`.
pub fn build_subspace_right<T: Scalar>(op: &MultitermOperator<T>, r0: &DMatrix<T>, k: usize) -> DMatrix<T> {
    let mats: Vec<&SparseSymMatrix<T>> = (0..op.num_terms()).map(|i| op.right_matrix(i)).collect();
    build_subspace_from(&mats, r0, k)
}

/// Largest principal-angle sine between `range(v)` and `range(basis)`,
/// with `basis` orthonormal.
pub fn subspace_gap<T: Scalar>(basis: &DMatrix<T>, v: &DMatrix<T>) -> T {
    if v.ncols() == 0 {
        return T::zero();
    }
    let (q, _) = thin_qr(v);
    let resid = &q - basis * (basis.transpose() * &q);
    resid.column_iter().map(|c| c.norm()).fold(T::zero(), |a, b| a.max(b))
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    name: String,
    n_a: usize,
    n_b: usize,
    rhs_left: String,
    rhs_right: String,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    terms: Vec<TermEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TermEntry {
    /// File name, or `identity`.
    a: String,
    b: String,
}

const MANIFEST: &str = "manifest.toml";
const IDENTITY: &str = "identity";

/// Writes `manifest.toml` plus Matrix Market files into `dir`.
///
/// Identity coefficients are recorded as `identity` instead of a file. The
/// right-hand side is stored as dense factors with `C = C_1 C_2^T`.
pub fn write_problem_dir<T: Scalar>(p: &ProblemInstance<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let op = &p.operator;
    let mut terms = Vec::with_capacity(op.num_terms());
    let mut written: Vec<(*const SparseSymMatrix<T>, String)> = Vec::new();
    let pairs = op.pairs();
    let mut file_for = |m: &Arc<SparseSymMatrix<T>>, stem: String| -> Result<String> {
        if m.is_identity() {
            return Ok(IDENTITY.into());
        }
        if let Some((_, f)) = written.iter().find(|(ptr, _)| *ptr == Arc::as_ptr(m)) {
            return Ok(f.clone());
        }
        let f = format!("{stem}.mtx");
        matrix_market::write_sparse(&dir.join(&f), m)?;
        written.push((Arc::as_ptr(m), f.clone()));
        Ok(f)
    };
    for (i, (a, b)) in pairs.iter().enumerate() {
        let a = file_for(a, format!("term{}_a", i + 1))?;
        let b = file_for(b, format!("term{}_b", i + 1))?;
        terms.push(TermEntry { a, b });
    }
    let c1 = p.rhs.left() * p.rhs.core();
    matrix_market::write_dense(&dir.join("rhs_left.mtx"), &c1)?;
    matrix_market::write_dense(&dir.join("rhs_right.mtx"), p.rhs.right())?;
    let manifest = Manifest {
        name: p.name.clone(),
        n_a: op.n_a(),
        n_b: op.n_b(),
        rhs_left: "rhs_left.mtx".into(),
        rhs_right: "rhs_right.mtx".into(),
        metadata: p.metadata.clone(),
        terms,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_problem_dir<T: Scalar>(dir: &Path) -> Result<ProblemInstance<T>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
    if manifest.terms.is_empty() {
        return Err(Error::parse(&path, "manifest lists no terms"));
    }
    let mut cache: BTreeMap<String, Arc<SparseSymMatrix<T>>> = BTreeMap::new();
    let mut load = |f: &str, n: usize| -> Result<Arc<SparseSymMatrix<T>>> {
        let key = if f == IDENTITY { format!("{IDENTITY}:{n}") } else { f.to_string() };
        if let Some(m) = cache.get(&key) {
            return Ok(m.clone());
        }
        let m = if f == IDENTITY {
            Arc::new(SparseSymMatrix::identity(n))
        } else {
            Arc::new(matrix_market::read_sparse(&dir.join(f))?)
        };
        cache.insert(key, m.clone());
        Ok(m)
    };
    let mut pairs = Vec::with_capacity(manifest.terms.len());
    for t in &manifest.terms {
        pairs.push((load(&t.a, manifest.n_a)?, load(&t.b, manifest.n_b)?));
    }
    let operator = MultitermOperator::new(pairs)?;
    if operator.n_a() != manifest.n_a || operator.n_b() != manifest.n_b {
        return Err(Error::parse(
            &path,
            format!(
                "manifest declares {}x{} but term files are {}x{}",
                manifest.n_a,
                manifest.n_b,
                operator.n_a(),
                operator.n_b()
            ),
        ));
    }
    let c1 = matrix_market::read_dense::<T>(&dir.join(&manifest.rhs_left))?;
    let c2 = matrix_market::read_dense::<T>(&dir.join(&manifest.rhs_right))?;
    if c1.ncols() != c2.ncols() || c1.nrows() != manifest.n_a || c2.nrows() != manifest.n_b {
        return Err(Error::parse(
            &path,
            format!(
                "right-hand side factors are {}x{} and {}x{}",
                c1.nrows(),
                c1.ncols(),
                c2.nrows(),
                c2.ncols()
            ),
        ));
    }
    let rhs = LowRankTriple::from_outer(&c1, &DMatrix::identity(c1.ncols(), c1.ncols()), &c2)?;
    Ok(ProblemInstance { name: manifest.name, operator, rhs, metadata: manifest.metadata })
}
