//! Preconditioned subspace conjugate gradient driver.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dense::{blkdiag, frobenius, symmetrize, thin_qr};
use crate::error::{Error, Result};
use crate::lowrank::{frob_norm_factored, inner_product_factored, stopping_change, BlockFactorization, LowRankTriple, MultitermOperator};
use crate::precond::{Preconditioner, PreconditionerSpec};
use crate::reduced::{assemble_hessian, project_operator, solve_alpha, solve_beta, BetaVariant, KRON_CAP};
use crate::scalar::Scalar;
use crate::truncation::{
    residual_blocks, truncate_qrsvd, truncate_symmetric, ResidualEvaluator, ResidualStrategy, Truncated,
    TruncationParams,
};

/// Consecutive plateau iterations before the stagnation annotation fires.
pub const STAGNATION_WINDOW: usize = 10;

/// Stacked residual entries above which the final check switches to a
/// randomized estimate.
pub const TRUE_RESIDUAL_CAP: usize = 50_000_000;

const PROBES: usize = 32;

#[derive(Debug, Clone)]
pub struct SolverConfig<T: Scalar> {
    pub tol: f64,
    pub maxit: usize,
    pub truncation: TruncationParams,
    pub residual_strategy: ResidualStrategy,
    pub seed: u64,
    pub precond: PreconditionerSpec<T>,
    pub beta_variant: BetaVariant,
    /// Single-sided factors `X^l = X^r` with symmetric cores.
    pub symmetric_mode: bool,
}

impl<T: Scalar> SolverConfig<T> {
    /// Identity preconditioner, full residual, derivation beta.
    pub fn new(tol: f64, maxit: usize, truncation: TruncationParams) -> Self {
        Self {
            tol,
            maxit,
            truncation,
            residual_strategy: ResidualStrategy::Full,
            seed: 0,
            precond: PreconditionerSpec::Identity,
            beta_variant: BetaVariant::Derivation,
            symmetric_mode: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || !self.tol.is_finite() {
            return Err(Error::InvalidParameter(format!("tol must be positive, got {}", self.tol)));
        }
        if self.maxit == 0 {
            return Err(Error::InvalidParameter("maxit must be at least 1".into()));
        }
        self.truncation.validate()?;
        let s = self.truncation.maxrank;
        if s * s > KRON_CAP {
            return Err(Error::ReducedTooLarge { dim: s * s, cap: KRON_CAP });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Converged,
    MaxIterations,
    ReducedSolveFailure,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Converged => "converged",
            Self::MaxIterations => "max_iterations",
            Self::ReducedSolveFailure => "reduced_solve_failure",
        })
    }
}

/// One row of the convergence history.
///
/// `rank_p`, `rank_r`, `tail_r` and `rho_diag` describe the direction and
/// residual the step was computed from; `rank_x` and `tail_x` the new iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub rel_change: f64,
    pub rank_x: usize,
    pub rank_p: usize,
    pub rank_r: usize,
    pub rank_z: usize,
    pub tail_x: f64,
    pub tail_r: f64,
    /// `||rho_k||_F / ||C||_F`, the norm of the truncated residual.
    pub rho_diag: f64,
    pub millis: f64,
}

/// Final `||C - L(X)||_F / ||C||_F`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualCheck {
    pub value: f64,
    /// Set when the value is a randomized estimate.
    pub estimated: bool,
}

#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub records: Vec<IterationRecord>,
    pub status: Status,
    pub failure: Option<String>,
    pub annotations: Vec<String>,
    pub final_true_relres: Option<ResidualCheck>,
    pub total_millis: f64,
}

pub const ITERATION_COLUMNS: [&str; 9] =
    ["iter", "rel_change", "rank_X", "rank_P", "rank_R", "tail_X", "tail_R", "rho_diag", "millis"];
pub const SUMMARY_COLUMNS: [&str; 4] = ["status", "iterations", "final_true_relres", "total_millis"];

impl ConvergenceReport {
    pub(crate) fn empty() -> Self {
        Self {
            records: Vec::new(),
            status: Status::MaxIterations,
            failure: None,
            annotations: Vec::new(),
            final_true_relres: None,
            total_millis: 0.0,
        }
    }

    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn converged(&self) -> bool {
        self.status == Status::Converged
    }

    pub fn last_rel_change(&self) -> Option<f64> {
        self.records.last().map(|r| r.rel_change)
    }

    /// `final_true_relres` as text, with an `estimated:` prefix when sketched.
    pub fn relres_field(&self) -> String {
        match self.final_true_relres {
            Some(ResidualCheck { value, estimated: false }) => format!("{value:e}"),
            Some(ResidualCheck { value, estimated: true }) => format!("estimated:{value:e}"),
            None => String::new(),
        }
    }

    pub fn write_iterations<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(ITERATION_COLUMNS)?;
        for r in &self.records {
            out.write_record([
                r.iter.to_string(),
                format!("{:e}", r.rel_change),
                r.rank_x.to_string(),
                r.rank_p.to_string(),
                r.rank_r.to_string(),
                format!("{:e}", r.tail_x),
                format!("{:e}", r.tail_r),
                format!("{:e}", r.rho_diag),
                format!("{:.3}", r.millis),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }

    pub fn write_summary<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(SUMMARY_COLUMNS)?;
        out.write_record([
            self.status.to_string(),
            self.iterations().to_string(),
            self.relres_field(),
            format!("{:.3}", self.total_millis),
        ])?;
        out.flush().map_err(|e| Error::io("<csv>", e))
    }

    pub fn write_iterations_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_iterations(f)
    }

    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_summary(f)
    }
}

/// State handed to an observer after every step.
///
/// `r` and `p_left`/`p_right` are the residual and direction bases the step
/// used; `r_next`, `z_next`, `beta` and `p_next` are absent on the final step.
/// `p_next` still carries its core, so it equals `Z + P beta P^T` up to
/// truncation.
pub struct IterationSnapshot<'a, T: Scalar> {
    pub k: usize,
    pub x_prev: &'a LowRankTriple<T>,
    pub x_next: &'a LowRankTriple<T>,
    pub r: &'a LowRankTriple<T>,
    pub p_left: &'a DMatrix<T>,
    pub p_right: &'a DMatrix<T>,
    pub alpha: &'a DMatrix<T>,
    pub r_next: Option<&'a LowRankTriple<T>>,
    pub z_next: Option<&'a LowRankTriple<T>>,
    pub beta: Option<&'a DMatrix<T>>,
    pub p_next: Option<&'a LowRankTriple<T>>,
}

pub fn solve_sscg<T: Scalar>(
    op: &MultitermOperator<T>,
    c: &LowRankTriple<T>,
    x0: &LowRankTriple<T>,
    cfg: &SolverConfig<T>,
) -> Result<(LowRankTriple<T>, ConvergenceReport)> {
    solve_sscg_observed(op, c, x0, cfg, |_| {})
}

/// Symmetric path: requires a symmetry-preserving operator and symmetric `C`.
pub fn solve_sscg_symmetric<T: Scalar>(
    op: &MultitermOperator<T>,
    c: &LowRankTriple<T>,
    x0: &LowRankTriple<T>,
    cfg: &SolverConfig<T>,
) -> Result<(LowRankTriple<T>, ConvergenceReport)> {
    let mut cfg = cfg.clone();
    cfg.symmetric_mode = true;
    solve_sscg_observed(op, c, x0, &cfg, |_| {})
}

pub fn solve_sscg_observed<T: Scalar, F>(
    op: &MultitermOperator<T>,
    c: &LowRankTriple<T>,
    x0: &LowRankTriple<T>,
    cfg: &SolverConfig<T>,
    mut observer: F,
) -> Result<(LowRankTriple<T>, ConvergenceReport)>
where
    F: FnMut(&IterationSnapshot<'_, T>),
{
    cfg.validate()?;
    check_shapes(op, c, x0)?;
    let sym = cfg.symmetric_mode;
    if sym {
        check_symmetric_input(op, c, x0)?;
    }
    let params = &cfg.truncation;
    let start = Instant::now();
    let c_norm = frob_norm_factored(c).to_f64_lossy();
    let evaluator = ResidualEvaluator::new(cfg.residual_strategy, op.n_a(), op.n_b(), params, cfg.seed);
    let pre = Preconditioner::new(&cfg.precond)?;
    let residual = |x: &LowRankTriple<T>| -> Result<Truncated<T>> {
        let r = evaluator.evaluate(op, c, x, params)?;
        if sym { symmetric_part(r, params.tolrank, params.maxrank_r) } else { Ok(r) }
    };
    let precondition = |r: &LowRankTriple<T>| -> Result<Truncated<T>> {
        let z = pre.apply(r, params)?;
        if sym { symmetric_part(z, params.tolrank, params.maxrank) } else { Ok(z) }
    };
    let compress = |l: [&DMatrix<T>; 2], core: DMatrix<T>, r: [&DMatrix<T>; 2]| -> Result<Truncated<T>> {
        if sym {
            truncate_symmetric(&l, &symmetrize(&core), params.tolrank, params.maxrank)
        } else {
            let bf = BlockFactorization::new(vec![l[0].clone(), l[1].clone()], core, vec![r[0].clone(), r[1].clone()])?;
            truncate_qrsvd(&bf, params)
        }
    };

    let mut report = ConvergenceReport::empty();
    let mut x = x0.clone();
    let mut r = residual(&x)?;
    if r.value.rank() == 0 {
        report.status = Status::Converged;
        return finish(op, c, x, report, start);
    }
    let z = precondition(&r.value)?;
    if z.value.rank() == 0 {
        report.status = Status::Converged;
        return finish(op, c, x, report, start);
    }
    let (mut pl, _, mut pr) = z.value.into_parts();
    let mut plateau = 0usize;
    let mut prev_change = f64::INFINITY;

    for k in 0..cfg.maxit {
        let step_start = Instant::now();
        let po = project_operator(op, &pl, &pr)?;
        let h = match assemble_hessian(&po) {
            Ok(h) => h,
            Err(e @ Error::IndefiniteHessian { .. }) => {
                report.status = Status::ReducedSolveFailure;
                report.failure = Some(format!("iteration {k}: {e}"));
                return finish(op, c, x, report, start);
            }
            Err(e) => return Err(e),
        };
        let mut alpha = solve_alpha(&h, &po, &po.project(&r.value))?.coeff;
        if sym {
            alpha = symmetrize(&alpha);
        }
        let xt = compress(
            [x.left(), &pl],
            blkdiag(&[x.core(), &alpha]),
            [x.right(), &pr],
        )?;
        let rel = stopping_change(&x, &xt.value)?.to_f64_lossy();
        let x_prev = std::mem::replace(&mut x, xt.value);
        let mut record = IterationRecord {
            iter: k + 1,
            rel_change: rel,
            rank_x: x.rank(),
            rank_p: pl.ncols(),
            rank_r: r.value.rank(),
            rank_z: 0,
            tail_x: xt.tail.to_f64_lossy(),
            tail_r: r.tail.to_f64_lossy(),
            rho_diag: if c_norm > 0.0 { frobenius(r.value.core()).to_f64_lossy() / c_norm } else { 0.0 },
            millis: 0.0,
        };

        if rel <= cfg.tol {
            observer(&IterationSnapshot {
                k,
                x_prev: &x_prev,
                x_next: &x,
                r: &r.value,
                p_left: &pl,
                p_right: &pr,
                alpha: &alpha,
                r_next: None,
                z_next: None,
                beta: None,
                p_next: None,
            });
            record.millis = step_start.elapsed().as_secs_f64() * 1e3;
            report.records.push(record);
            report.status = Status::Converged;
            return finish(op, c, x, report, start);
        }

        let r_next = residual(&x)?;
        if r_next.value.rank() == 0 {
            record.millis = step_start.elapsed().as_secs_f64() * 1e3;
            report.records.push(record);
            report.status = Status::Converged;
            return finish(op, c, x, report, start);
        }
        let z = precondition(&r_next.value)?;
        record.rank_z = z.value.rank();
        let mut beta = solve_beta(&h, &po, &z.value, cfg.beta_variant)?.coeff;
        if sym {
            beta = symmetrize(&beta);
        }
        let p_next = if z.value.rank() == 0 {
            LowRankTriple::from_parts_unchecked(pl.clone(), beta.clone(), pr.clone())
        } else {
            compress(
                [z.value.left(), &pl],
                blkdiag(&[z.value.core(), &beta]),
                [z.value.right(), &pr],
            )?
            .value
        };
        observer(&IterationSnapshot {
            k,
            x_prev: &x_prev,
            x_next: &x,
            r: &r.value,
            p_left: &pl,
            p_right: &pr,
            alpha: &alpha,
            r_next: Some(&r_next.value),
            z_next: Some(&z.value),
            beta: Some(&beta),
            p_next: Some(&p_next),
        });
        record.millis = step_start.elapsed().as_secs_f64() * 1e3;
        report.records.push(record);

        if rel > 0.9 * prev_change {
            plateau += 1;
        } else {
            plateau = 0;
        }
        prev_change = rel;
        if plateau == STAGNATION_WINDOW {
            report.annotations.push(format!(
                "relative change plateaued near {rel:.3e} above tol for {STAGNATION_WINDOW} iterations \
                 (from iteration {}); the value of maxrank should be increased",
                k + 2 - STAGNATION_WINDOW
            ));
        }

        if p_next.rank() == 0 {
            report.status = Status::ReducedSolveFailure;
            report.failure = Some(format!("iteration {}: direction subspace vanished after truncation", k + 1));
            return finish(op, c, x, report, start);
        }
        r = r_next;
        let (l, _, rr) = p_next.into_parts();
        pl = l;
        pr = rr;
    }
    report.status = Status::MaxIterations;
    finish(op, c, x, report, start)
}

fn finish<T: Scalar>(
    op: &MultitermOperator<T>,
    c: &LowRankTriple<T>,
    x: LowRankTriple<T>,
    mut report: ConvergenceReport,
    start: Instant,
) -> Result<(LowRankTriple<T>, ConvergenceReport)> {
    report.total_millis = start.elapsed().as_secs_f64() * 1e3;
    report.final_true_relres = Some(true_relative_residual(op, c, &x, 0)?);
    Ok((x, report))
}

pub(crate) fn check_shapes<T: Scalar>(
    op: &MultitermOperator<T>,
    c: &LowRankTriple<T>,
    x0: &LowRankTriple<T>,
) -> Result<()> {
    for (what, m) in [("right-hand side", c), ("initial guess", x0)] {
        if m.n_a() != op.n_a() || m.n_b() != op.n_b() {
            return Err(Error::Dimension(format!(
                "{what} is {}x{}, operator acts on {}x{}",
                m.n_a(),
                m.n_b(),
                op.n_a(),
                op.n_b()
            )));
        }
    }
    Ok(())
}

/// `||M - M^T||_F` from `[L R] blkdiag(D, -D^T) [R L]^T`.
fn asymmetry<T: Scalar>(m: &LowRankTriple<T>) -> Result<f64> {
    if m.rank() == 0 {
        return Ok(0.0);
    }
    let neg_t = -m.core().transpose();
    let bf = BlockFactorization::new(
        vec![m.left().clone(), m.right().clone()],
        blkdiag(&[m.core(), &neg_t]),
        vec![m.right().clone(), m.left().clone()],
    )?;
    let (_, rl) = thin_qr(&bf.left_stacked());
    let (_, rr) = thin_qr(&bf.right_stacked());
    Ok(frobenius(&(rl * bf.core() * rr.transpose())).to_f64_lossy())
}

fn check_symmetric_input<T: Scalar>(
    op: &MultitermOperator<T>,
    c: &LowRankTriple<T>,
    x0: &LowRankTriple<T>,
) -> Result<()> {
    if !op.is_symmetric() {
        return Err(Error::Symmetry("operator does not preserve symmetry".into()));
    }
    for (what, m) in [("right-hand side", c), ("initial guess", x0)] {
        let n = frob_norm_factored(m).to_f64_lossy();
        let a = asymmetry(m)?;
        if a > 1e-10 * n {
            return Err(Error::Symmetry(format!("{what} is not symmetric (||M - M^T||_F = {a:e})")));
        }
    }
    Ok(())
}

/// Single-sided form of a (numerically) symmetric triple `L D R^T`, computed
/// from `[L R] [[0, D/2], [D^T/2, 0]] [L R]^T`.
fn symmetric_part<T: Scalar>(t: Truncated<T>, tolrank: f64, cap: usize) -> Result<Truncated<T>> {
    let r = t.value.rank();
    if r == 0 {
        return Ok(t);
    }
    let half = T::lit(0.5);
    let mut core = DMatrix::zeros(2 * r, 2 * r);
    core.view_mut((0, r), (r, r)).copy_from(&(t.value.core() * half));
    core.view_mut((r, 0), (r, r)).copy_from(&(t.value.core().transpose() * half));
    let out = truncate_symmetric(&[t.value.left(), t.value.right()], &core, tolrank, cap)?;
    Ok(Truncated { value: out.value, tail: (t.tail * t.tail + out.tail * out.tail).sqrt() })
}

/// `<grad Phi(X_{k+1}), P_{k+1}> + ||R_{k+1}||_F^2` with
/// `P_{k+1} = Z_{k+1} + P^l beta (P^r)^T` and `grad Phi = -R`.
///
/// Zero in exact arithmetic for the untruncated, unpreconditioned iteration.
pub fn check_descent<T: Scalar>(
    r_next: &LowRankTriple<T>,
    z_next: &LowRankTriple<T>,
    beta: &DMatrix<T>,
    p_left: &DMatrix<T>,
    p_right: &DMatrix<T>,
) -> Result<T> {
    let rr = frob_norm_factored(r_next);
    if r_next.rank() == 0 {
        return Ok(T::zero());
    }
    let rz = inner_product_factored(r_next, z_next)?;
    let rp = if p_left.ncols() == 0 {
        T::zero()
    } else {
        crate::lowrank::factored_trace(r_next.left(), r_next.core(), r_next.right(), p_left, beta, p_right)
    };
    Ok(rr * rr - rz - rp)
}

/// `||C - L(X)||_F / ||C||_F`.
///
/// Exact from the stacked residual factors when they fit under
/// [`TRUE_RESIDUAL_CAP`]; otherwise a Gaussian-probe estimate.
pub fn true_relative_residual<T: Scalar>(
    op: &MultitermOperator<T>,
    c: &LowRankTriple<T>,
    x: &LowRankTriple<T>,
    seed: u64,
) -> Result<ResidualCheck> {
    true_relative_residual_capped(op, c, x, seed, TRUE_RESIDUAL_CAP)
}

pub fn true_relative_residual_capped<T: Scalar>(
    op: &MultitermOperator<T>,
    c: &LowRankTriple<T>,
    x: &LowRankTriple<T>,
    seed: u64,
    cap: usize,
) -> Result<ResidualCheck> {
    check_shapes(op, c, x)?;
    let c_norm = frob_norm_factored(c).to_f64_lossy();
    let width = c.rank() + op.num_terms() * x.rank();
    let (norm, estimated) = if width * (op.n_a() + op.n_b()) <= cap {
        (exact_residual_norm(op, c, x)?, false)
    } else {
        (estimated_residual_norm(op, c, x, seed), true)
    };
    let value = if c_norm > 0.0 { norm / c_norm } else { norm };
    Ok(ResidualCheck { value, estimated })
}

fn exact_residual_norm<T: Scalar>(op: &MultitermOperator<T>, c: &LowRankTriple<T>, x: &LowRankTriple<T>) -> Result<f64> {
    let bf = residual_blocks(op, c, x)?;
    if bf.width() == 0 {
        return Ok(0.0);
    }
    let (_, rl) = thin_qr(&bf.left_stacked());
    let (_, rr) = thin_qr(&bf.right_stacked());
    Ok(frobenius(&(rl * bf.core() * rr.transpose())).to_f64_lossy())
}

/// `sqrt(mean ||R g||^2)` over Gaussian probes `g`, touching only `n x PROBES`
/// blocks.
fn estimated_residual_norm<T: Scalar>(op: &MultitermOperator<T>, c: &LowRankTriple<T>, x: &LowRankTriple<T>, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::<T>::from_fn(op.n_b(), PROBES, |_, _| {
        let v: f64 = StandardNormal.sample(&mut rng);
        T::lit(v)
    });
    let mut rg = if c.rank() == 0 {
        DMatrix::zeros(op.n_a(), PROBES)
    } else {
        c.left() * (c.core() * (c.right().transpose() * &g))
    };
    if x.rank() > 0 {
        for i in 0..op.num_terms() {
            let bg = op.apply_right(i, &g);
            let inner = x.left() * (x.core() * (x.right().transpose() * bg));
            rg -= op.apply_left(i, &inner);
        }
    }
    (frobenius(&rg).to_f64_lossy().powi(2) / PROBES as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::orthonormal_columns;
    use crate::sparse::SparseSymMatrix;
    use rand::Rng;

    fn rd(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn spd(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> SparseSymMatrix<f64> {
        let g = rd(rng, n, n);
        SparseSymMatrix::from_dense(&(&g * g.transpose() / n as f64 + DMatrix::identity(n, n) * shift)).unwrap()
    }

    fn rhs(rng: &mut ChaCha8Rng, na: usize, nb: usize, s: usize) -> LowRankTriple<f64> {
        LowRankTriple::from_outer(&rd(rng, na, s), &DMatrix::identity(s, s), &rd(rng, nb, s)).unwrap()
    }

    fn oracle(op: &MultitermOperator<f64>, c: &LowRankTriple<f64>) -> DMatrix<f64> {
        let k = op.kronecker_dense();
        let v = crate::dense::vec_of(&c.to_dense());
        let sol = k.cholesky().unwrap().solve(&v);
        crate::dense::unvec(&sol, op.n_a(), op.n_b())
    }

    #[test]
    fn identity_operator_converges_in_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let op = MultitermOperator::from_pairs(vec![(SparseSymMatrix::identity(6), SparseSymMatrix::identity(5))]).unwrap();
        let c = rhs(&mut rng, 6, 5, 1);
        let cfg = SolverConfig::new(1e-8, 10, TruncationParams::new(1e-12, 5).unwrap());
        let (x, rep) = solve_sscg(&op, &c, &LowRankTriple::zero(6, 5), &cfg).unwrap();
        assert!(rep.converged());
        assert!(rep.iterations() <= 2, "{}", rep.iterations());
        assert!((x.to_dense() - c.to_dense()).norm() < 1e-12);
        assert!(rep.final_true_relres.unwrap().value < 1e-12);
    }

    #[test]
    fn zero_rhs_returns_initial_guess() {
        let op = MultitermOperator::from_pairs(vec![(SparseSymMatrix::identity(4), SparseSymMatrix::identity(4))]).unwrap();
        let c = LowRankTriple::<f64>::zero(4, 4);
        let cfg = SolverConfig::new(1e-8, 10, TruncationParams::new(1e-12, 4).unwrap());
        let (x, rep) = solve_sscg(&op, &c, &LowRankTriple::zero(4, 4), &cfg).unwrap();
        assert_eq!(rep.iterations(), 0);
        assert!(rep.converged());
        assert_eq!(x.rank(), 0);
    }

    #[test]
    fn untruncated_solve_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 12;
        let op = MultitermOperator::from_pairs(vec![
            (spd(&mut rng, n, 1.0), SparseSymMatrix::identity(n)),
            (SparseSymMatrix::identity(n), spd(&mut rng, n, 1.0)),
            (spd(&mut rng, n, 0.1), spd(&mut rng, n, 0.1)),
        ])
        .unwrap();
        let c = rhs(&mut rng, n, n, 2);
        let cfg = SolverConfig::new(1e-10, 100, TruncationParams::new(1e-14, n).unwrap());
        let (x, rep) = solve_sscg(&op, &c, &LowRankTriple::zero(n, n), &cfg).unwrap();
        assert!(rep.converged(), "{:?}", rep.status);
        let xo = oracle(&op, &c);
        let err = (x.to_dense() - &xo).norm() / xo.norm();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn symmetric_path_solves_lyapunov() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20;
        let d: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        let a = SparseSymMatrix::diagonal(&d);
        let op = MultitermOperator::from_pairs(vec![(a.clone(), SparseSymMatrix::identity(n)), (SparseSymMatrix::identity(n), a)])
            .unwrap();
        let f = orthonormal_columns(&rd(&mut rng, n, 1));
        let c = LowRankTriple::new(f.clone(), DMatrix::from_element(1, 1, 2.0), f).unwrap();
        let cfg = SolverConfig::new(1e-12, 200, TruncationParams::new(1e-14, n).unwrap());
        let (x, rep) = solve_sscg_symmetric(&op, &c, &LowRankTriple::zero(n, n), &cfg).unwrap();
        assert!(rep.converged());
        assert_eq!(x.left(), x.right());
        let xo = oracle(&op, &c);
        let err = (x.to_dense() - &xo).norm() / xo.norm();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn symmetric_path_rejects_nonsymmetric_rhs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let op = MultitermOperator::from_pairs(vec![(SparseSymMatrix::identity(5), SparseSymMatrix::identity(5))]).unwrap();
        let c = rhs(&mut rng, 5, 5, 1);
        let cfg = SolverConfig::new(1e-8, 10, TruncationParams::new(1e-12, 5).unwrap());
        let err = solve_sscg_symmetric(&op, &c, &LowRankTriple::zero(5, 5), &cfg).unwrap_err();
        assert!(matches!(err, Error::Symmetry(_)), "{err}");
    }

    #[test]
    fn indefinite_operator_reports_failure() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 6;
        let d: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let op = MultitermOperator::from_pairs(vec![(SparseSymMatrix::diagonal(&d), SparseSymMatrix::identity(n))]).unwrap();
        let c = rhs(&mut rng, n, n, 2);
        let cfg = SolverConfig::new(1e-10, 20, TruncationParams::new(1e-14, n).unwrap());
        let (_, rep) = solve_sscg(&op, &c, &LowRankTriple::zero(n, n), &cfg).unwrap();
        assert_eq!(rep.status, Status::ReducedSolveFailure);
        assert!(rep.failure.unwrap().contains("positive definite"));
    }

    #[test]
    fn config_validation() {
        let p = TruncationParams::new(1e-12, 5).unwrap();
        assert!(SolverConfig::<f64>::new(0.0, 10, p.clone()).validate().is_err());
        assert!(SolverConfig::<f64>::new(1e-6, 0, p).validate().is_err());
        let big = TruncationParams::new(1e-12, 80).unwrap();
        assert!(matches!(SolverConfig::<f64>::new(1e-6, 5, big).validate(), Err(Error::ReducedTooLarge { .. })));
    }

    #[test]
    fn estimate_tracks_exact_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 30;
        let op = MultitermOperator::from_pairs(vec![(spd(&mut rng, n, 1.0), SparseSymMatrix::identity(n))]).unwrap();
        let c = rhs(&mut rng, n, n, 2);
        let x = rhs(&mut rng, n, n, 3).scaled(0.1);
        let exact = true_relative_residual(&op, &c, &x, 0).unwrap();
        let est = true_relative_residual_capped(&op, &c, &x, 0, 0).unwrap();
        assert!(!exact.estimated && est.estimated);
        assert!((est.value / exact.value - 1.0).abs() < 0.5, "{} vs {}", est.value, exact.value);
        let zero = true_relative_residual(&op, &c, &LowRankTriple::zero(n, n), 0).unwrap();
        assert!((zero.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_schema() {
        let mut rep = ConvergenceReport::empty();
        rep.records.push(IterationRecord {
            iter: 1,
            rel_change: 0.5,
            rank_x: 2,
            rank_p: 2,
            rank_r: 3,
            rank_z: 2,
            tail_x: 0.0,
            tail_r: 1e-3,
            rho_diag: 1.0,
            millis: 1.5,
        });
        rep.status = Status::Converged;
        rep.final_true_relres = Some(ResidualCheck { value: 1e-7, estimated: false });
        let mut buf = Vec::new();
        rep.write_iterations(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iter,rel_change,rank_X,rank_P,rank_R,tail_X,tail_R,rho_diag,millis\n1,5e-1,2,2,3,"));
        let mut buf = Vec::new();
        rep.write_summary(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "status,iterations,final_true_relres,total_millis");
        assert!(text.lines().nth(1).unwrap().starts_with("converged,1,1e-7,"));
    }
}
