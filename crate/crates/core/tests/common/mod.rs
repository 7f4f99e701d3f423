#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sscg_core::dense::orthonormal_columns;
use sscg_core::{LowRankTriple, MultitermOperator, SparseSymMatrix};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rd(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// Symmetric with eigenvalues in `[shift, shift + 1]`.
pub fn spd(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> SparseSymMatrix<f64> {
    let g = rd(rng, n, n);
    let s = &g * g.transpose();
    let top = s.symmetric_eigenvalues().max();
    SparseSymMatrix::from_dense(&(s / top + DMatrix::identity(n, n) * shift)).unwrap()
}

/// Symmetric, indefinite, spectral norm `scale`.
pub fn sym(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> SparseSymMatrix<f64> {
    let g = rd(rng, n, n);
    let s = &g + g.transpose();
    let top = s.symmetric_eigenvalues().amax();
    SparseSymMatrix::from_dense(&(s * (scale / top))).unwrap()
}

pub fn triple(rng: &mut ChaCha8Rng, na: usize, nb: usize, r: usize) -> LowRankTriple<f64> {
    LowRankTriple::new(orthonormal_columns(&rd(rng, na, r)), rd(rng, r, r), orthonormal_columns(&rd(rng, nb, r))).unwrap()
}

/// `A_1 (x) B_1` with both factors SPD and spectra in `[1, 2]`, plus
/// `terms - 1` indefinite couplings whose norms sum to at most 0.6, so the
/// Kronecker matrix has spectrum above 0.4.
pub fn random_spd_operator(rng: &mut ChaCha8Rng, na: usize, nb: usize, terms: usize) -> MultitermOperator<f64> {
    let mut pairs = vec![(spd(rng, na, 1.0), spd(rng, nb, 1.0))];
    for _ in 1..terms {
        let w = 0.6 / (terms - 1) as f64;
        pairs.push((sym(rng, na, w), sym(rng, nb, 1.0)));
    }
    MultitermOperator::from_pairs(pairs).unwrap()
}

pub fn random_rhs(rng: &mut ChaCha8Rng, na: usize, nb: usize, s: usize) -> LowRankTriple<f64> {
    LowRankTriple::from_outer(&rd(rng, na, s), &DMatrix::identity(s, s), &rd(rng, nb, s)).unwrap()
}

/// `0.5 <X, L(X)> - <X, C>`.
pub fn energy(op: &MultitermOperator<f64>, c: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
    0.5 * x.dot(&op.apply_dense(x)) - x.dot(c)
}
