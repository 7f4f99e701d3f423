//! Truncated preconditioned CG on factored iterates.
//!
//! Scalar steps `alpha = <R, Z> / <P, L(P)>` and the Fletcher-Reeves update
//! `beta = <Z_{k+1}, R_{k+1}> / <Z_k, R_k>`. Every update is recompressed with
//! the same truncation, preconditioning and residual code as the subspace
//! solver. `symmetric_mode` is ignored here.

use std::time::Instant;

use nalgebra::DMatrix;

use crate::dense::frobenius;
use crate::error::{Error, Result};
use crate::lowrank::{factored_trace, inner_product_factored, stopping_change, BlockFactorization, LowRankTriple, MultitermOperator};
use crate::precond::Preconditioner;
use crate::scalar::Scalar;
use crate::solver::{check_shapes, true_relative_residual, ConvergenceReport, IterationRecord, SolverConfig, Status};
use crate::truncation::{truncate_qrsvd, ResidualEvaluator, Truncated, TruncationParams};

/// State handed to an observer after every step.
pub struct TpcgStep<'a, T: Scalar> {
    pub k: usize,
    pub alpha: T,
    /// `<P, L(P)>` the step length was divided by.
    pub curvature: T,
    pub x_next: &'a LowRankTriple<T>,
    pub r: &'a LowRankTriple<T>,
    pub z: &'a LowRankTriple<T>,
    pub p: &'a LowRankTriple<T>,
    pub beta: Option<T>,
}

/// `<P, L(P)>` without forming `L(P)`.
pub fn energy_product<T: Scalar>(op: &MultitermOperator<T>, p: &LowRankTriple<T>) -> T {
    if p.rank() == 0 {
        return T::zero();
    }
    (0..op.num_terms()).fold(T::zero(), |acc, i| {
        let ap = op.apply_left(i, p.left());
        let bp = op.apply_right(i, p.right());
        acc + factored_trace(p.left(), p.core(), p.right(), &ap, p.core(), &bp)
    })
}

/// `T(a + s b)` with both operands factored.
fn axpy<T: Scalar>(a: &LowRankTriple<T>, s: T, b: &LowRankTriple<T>, params: &TruncationParams) -> Result<Truncated<T>> {
    let bf = BlockFactorization::new(
        vec![a.left().clone(), b.left().clone()],
        crate::dense::blkdiag(&[a.core(), &(b.core() * s)]),
        vec![a.right().clone(), b.right().clone()],
    )?;
    truncate_qrsvd(&bf, params)
}

pub fn solve_tpcg<T: Scalar>(
    op: &MultitermOperator<T>,
    c: &LowRankTriple<T>,
    x0: &LowRankTriple<T>,
    cfg: &SolverConfig<T>,
) -> Result<(LowRankTriple<T>, ConvergenceReport)> {
    solve_tpcg_observed(op, c, x0, cfg, |_| {})
}

pub fn solve_tpcg_observed<T: Scalar, F>(
    op: &MultitermOperator<T>,
    c: &LowRankTriple<T>,
    x0: &LowRankTriple<T>,
    cfg: &SolverConfig<T>,
    mut observer: F,
) -> Result<(LowRankTriple<T>, ConvergenceReport)>
where
    F: FnMut(&TpcgStep<'_, T>),
{
    cfg.validate()?;
    check_shapes(op, c, x0)?;
    let params = &cfg.truncation;
    let start = Instant::now();
    let c_norm = crate::lowrank::frob_norm_factored(c).to_f64_lossy();
    let evaluator = ResidualEvaluator::new(cfg.residual_strategy, op.n_a(), op.n_b(), params, cfg.seed);
    let pre = Preconditioner::new(&cfg.precond)?;

    let mut report = ConvergenceReport::empty();
    let mut x = x0.clone();
    let mut r = evaluator.evaluate(op, c, &x, params)?;
    if r.value.rank() == 0 {
        report.status = Status::Converged;
        return finish(op, c, x, report, start);
    }
    let mut z = pre.apply(&r.value, params)?.value;
    let mut rz = inner_product_factored(&r.value, &z)?;
    let mut p = z.clone();

    for k in 0..cfg.maxit {
        let step_start = Instant::now();
        let curvature = energy_product(op, &p);
        if !(curvature > T::zero()) || !(rz > T::zero()) {
            report.status = Status::ReducedSolveFailure;
            report.failure = Some(format!(
                "iteration {k}: non-positive curvature {:e} or preconditioned residual product {:e}",
                curvature.to_f64_lossy(),
                rz.to_f64_lossy()
            ));
            return finish(op, c, x, report, start);
        }
        let alpha = rz / curvature;
        let xt = axpy(&x, alpha, &p, params)?;
        if xt.value.rank() == 0 {
            return Err(Error::ZeroIterate);
        }
        let rel = stopping_change(&x, &xt.value)?.to_f64_lossy();
        x = xt.value;
        let mut record = IterationRecord {
            iter: k + 1,
            rel_change: rel,
            rank_x: x.rank(),
            rank_p: p.rank(),
            rank_r: r.value.rank(),
            rank_z: z.rank(),
            tail_x: xt.tail.to_f64_lossy(),
            tail_r: r.tail.to_f64_lossy(),
            rho_diag: if c_norm > 0.0 { frobenius(r.value.core()).to_f64_lossy() / c_norm } else { 0.0 },
            millis: 0.0,
        };
        if rel <= cfg.tol {
            observer(&TpcgStep { k, alpha, curvature, x_next: &x, r: &r.value, z: &z, p: &p, beta: None });
            record.millis = step_start.elapsed().as_secs_f64() * 1e3;
            report.records.push(record);
            report.status = Status::Converged;
            return finish(op, c, x, report, start);
        }
        let r_next = evaluator.evaluate(op, c, &x, params)?;
        if r_next.value.rank() == 0 {
            record.millis = step_start.elapsed().as_secs_f64() * 1e3;
            report.records.push(record);
            report.status = Status::Converged;
            return finish(op, c, x, report, start);
        }
        let z_next = pre.apply(&r_next.value, params)?.value;
        let rz_next = inner_product_factored(&r_next.value, &z_next)?;
        let beta = rz_next / rz;
        observer(&TpcgStep { k, alpha, curvature, x_next: &x, r: &r.value, z: &z, p: &p, beta: Some(beta) });
        p = axpy(&z_next, beta, &p, params)?.value;
        r = r_next;
        z = z_next;
        rz = rz_next;
        record.millis = step_start.elapsed().as_secs_f64() * 1e3;
        report.records.push(record);
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

/// Plain CG on the dense Kronecker system, returning the iterates and
/// residual norms `||b - K x_k||`. Test oracle for the factored version.
pub fn dense_vector_cg(k: &DMatrix<f64>, b: &[f64], tol: f64, maxit: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = b.len();
    let kx = |x: &[f64]| -> Vec<f64> { (0..n).map(|i| (0..n).map(|j| k[(i, j)] * x[j]).sum()).collect() };
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut xs = Vec::new();
    let mut norms = vec![rr.sqrt()];
    for _ in 0..maxit {
        let q = kx(&p);
        let alpha = rr / dot(&p, &q);
        let x_prev = x.clone();
        for i in 0..n {
            x[i] += alpha * p[i];
        }
        xs.push(x.clone());
        let change: f64 = x.iter().zip(&x_prev).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if change <= tol * dot(&x, &x).sqrt() {
            break;
        }
        let kxv = kx(&x);
        for i in 0..n {
            r[i] = b[i] - kxv[i];
        }
        let rr_next = dot(&r, &r);
        norms.push(rr_next.sqrt());
        let beta = rr_next / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_next;
    }
    (xs, norms)
}
