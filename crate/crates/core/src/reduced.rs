//! Projected small-scale equations for the step coefficients.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dense::{symmetrize, unvec, vec_of, DenseCholesky};
use crate::error::{Error, Result};
use crate::lowrank::{LowRankTriple, MultitermOperator};
use crate::scalar::Scalar;

/// Largest admissible Kronecker dimension `s_k^2` of the reduced Hessian.
pub const KRON_CAP: usize = 4096;

/// `(P^l)^T A_i P^l` and `(P^r)^T B_i P^r` for every term, plus the products
/// `A_i P^l`, `B_i P^r` reused for right-hand sides.
#[derive(Debug, Clone)]
pub struct ProjectedOperator<T: Scalar> {
    pub a: Vec<DMatrix<T>>,
    pub b: Vec<DMatrix<T>>,
    a_pl: Vec<DMatrix<T>>,
    b_pr: Vec<DMatrix<T>>,
    pl: DMatrix<T>,
    pr: DMatrix<T>,
}

impl<T: Scalar> ProjectedOperator<T> {
    pub fn dim(&self) -> usize {
        self.pl.ncols()
    }

    pub fn num_terms(&self) -> usize {
        self.a.len()
    }

    pub fn left_basis(&self) -> &DMatrix<T> {
        &self.pl
    }

    pub fn right_basis(&self) -> &DMatrix<T> {
        &self.pr
    }

    /// `sum_i A~_i Y B~_i`.
    pub fn apply(&self, y: &DMatrix<T>) -> DMatrix<T> {
        let s = self.dim();
        let mut out = DMatrix::zeros(s, s);
        for (a, b) in self.a.iter().zip(&self.b) {
            out += a * y * b;
        }
        out
    }

    /// `(P^l)^T L(Y) P^r` for a factored `Y`, term by term.
    pub fn project_image(&self, y: &LowRankTriple<T>) -> DMatrix<T> {
        let s = self.dim();
        let mut out = DMatrix::zeros(s, s);
        if y.rank() == 0 {
            return out;
        }
        for (apl, bpr) in self.a_pl.iter().zip(&self.b_pr) {
            out += (apl.transpose() * y.left()) * y.core() * (y.right().transpose() * bpr);
        }
        out
    }

    /// `(P^l)^T Y P^r` for a factored `Y`.
    pub fn project(&self, y: &LowRankTriple<T>) -> DMatrix<T> {
        if y.rank() == 0 {
            return DMatrix::zeros(self.dim(), self.dim());
        }
        (self.pl.transpose() * y.left()) * y.core() * (y.right().transpose() * &self.pr)
    }
}

/// Projects every term onto the bases `pl`, `pr`.
pub fn project_operator<T: Scalar>(
    op: &MultitermOperator<T>,
    pl: &DMatrix<T>,
    pr: &DMatrix<T>,
) -> Result<ProjectedOperator<T>> {
    if pl.ncols() != pr.ncols() {
        return Err(Error::Dimension(format!(
            "left basis has {} columns, right basis has {}",
            pl.ncols(),
            pr.ncols()
        )));
    }
    if pl.nrows() != op.n_a() || pr.nrows() != op.n_b() {
        return Err(Error::Dimension(format!(
            "bases have {} and {} rows, operator acts on {}x{}",
            pl.nrows(),
            pr.nrows(),
            op.n_a(),
            op.n_b()
        )));
    }
    let l = op.num_terms();
    let mut a = Vec::with_capacity(l);
    let mut b = Vec::with_capacity(l);
    let mut a_pl = Vec::with_capacity(l);
    let mut b_pr = Vec::with_capacity(l);
    for i in 0..l {
        let ap = op.apply_left(i, pl);
        let bp = op.apply_right(i, pr);
        a.push(symmetrize(&(pl.transpose() * &ap)));
        b.push(symmetrize(&(pr.transpose() * &bp)));
        a_pl.push(ap);
        b_pr.push(bp);
    }
    Ok(ProjectedOperator { a, b, a_pl, b_pr, pl: pl.clone(), pr: pr.clone() })
}

/// Dense `sum_i B_i (x) A_i`, symmetrized.
pub fn kron_sum<T: Scalar>(a: &[DMatrix<T>], b: &[DMatrix<T>]) -> DMatrix<T> {
    let s = a.first().map_or(0, |m| m.nrows());
    let mut h = DMatrix::zeros(s * s, s * s);
    for (ai, bi) in a.iter().zip(b) {
        h += bi.kronecker(ai);
    }
    symmetrize(&h)
}

/// Factorized reduced Hessian `H = sum_i B~_i (x) A~_i`.
#[derive(Debug, Clone)]
pub struct KronHessian<T: Scalar> {
    s: usize,
    chol: DenseCholesky<T>,
}

impl<T: Scalar> KronHessian<T> {
    pub fn subspace_dim(&self) -> usize {
        self.s
    }

    pub fn min_pivot(&self) -> T {
        self.chol.min_pivot()
    }

    /// `Y` with `sum_i A~_i Y B~_i = rhs`.
    pub fn solve(&self, rhs: &DMatrix<T>) -> DMatrix<T> {
        unvec(&self.chol.solve(&vec_of(rhs)), self.s, self.s)
    }
}

pub fn assemble_hessian<T: Scalar>(po: &ProjectedOperator<T>) -> Result<KronHessian<T>> {
    let s = po.dim();
    if s == 0 {
        return Err(Error::InvalidParameter("empty direction subspace".into()));
    }
    if s * s > KRON_CAP {
        return Err(Error::ReducedTooLarge { dim: s * s, cap: KRON_CAP });
    }
    let h = kron_sum(&po.a, &po.b);
    let chol = DenseCholesky::new(h)?;
    Ok(KronHessian { s, chol })
}

/// Step coefficient with its Galerkin residual norm `||rhs - L~(alpha)||_F`.
#[derive(Debug, Clone)]
pub struct ReducedSolution<T: Scalar> {
    pub coeff: DMatrix<T>,
    pub residual_norm: T,
}

pub fn solve_alpha<T: Scalar>(
    h: &KronHessian<T>,
    po: &ProjectedOperator<T>,
    rhs: &DMatrix<T>,
) -> Result<ReducedSolution<T>> {
    check_rhs(h, rhs)?;
    let coeff = h.solve(rhs);
    let residual_norm = (rhs - po.apply(&coeff)).norm();
    Ok(ReducedSolution { coeff, residual_norm })
}

/// Right-hand side used for the direction coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaVariant {
    /// `-(P^l)^T L(Z) P^r`: makes the new directions L-orthogonal to the old.
    #[default]
    Derivation,
    /// `+(P^l)^T Z P^r` as printed in the pseudocode.
    Printed,
}

impl std::str::FromStr for BetaVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "derivation" => Ok(Self::Derivation),
            "printed" => Ok(Self::Printed),
            other => Err(Error::InvalidParameter(format!(
                "unknown beta variant `{other}` (expected derivation or printed)"
            ))),
        }
    }
}

impl std::fmt::Display for BetaVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Derivation => "derivation",
            Self::Printed => "printed",
        })
    }
}

pub fn solve_beta<T: Scalar>(
    h: &KronHessian<T>,
    po: &ProjectedOperator<T>,
    z: &LowRankTriple<T>,
    variant: BetaVariant,
) -> Result<ReducedSolution<T>> {
    let rhs = match variant {
        BetaVariant::Derivation => -po.project_image(z),
        BetaVariant::Printed => po.project(z),
    };
    check_rhs(h, &rhs)?;
    let coeff = h.solve(&rhs);
    let residual_norm = (&rhs - po.apply(&coeff)).norm();
    Ok(ReducedSolution { coeff, residual_norm })
}

fn check_rhs<T: Scalar>(h: &KronHessian<T>, rhs: &DMatrix<T>) -> Result<()> {
    if rhs.shape() != (h.s, h.s) {
        return Err(Error::Dimension(format!(
            "reduced right-hand side is {}x{}, subspace dimension {}",
            rhs.nrows(),
            rhs.ncols(),
            h.s
        )));
    }
    if !rhs.iter().all(|v| v.is_finite_value()) {
        return Err(Error::NonFinite("reduced right-hand side"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::orthonormal_columns;
    use crate::lowrank::apply_operator_factored;
    use crate::sparse::SparseSymMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rd(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn spd_sparse(rng: &mut ChaCha8Rng, n: usize) -> SparseSymMatrix<f64> {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, rng.random_range(2.0..4.0)));
            for j in 0..i {
                if rng.random::<f64>() < 0.2 {
                    t.push((i, j, rng.random_range(-0.3..0.3)));
                }
            }
        }
        SparseSymMatrix::from_triplets(n, &t).unwrap()
    }

    fn spd_small(rng: &mut ChaCha8Rng, s: usize) -> DMatrix<f64> {
        let b = rd(rng, s, s);
        &b * b.transpose() + DMatrix::identity(s, s) * 0.5
    }

    fn spd_op(rng: &mut ChaCha8Rng, n: usize, l: usize) -> MultitermOperator<f64> {
        MultitermOperator::from_pairs((0..l).map(|_| (spd_sparse(rng, n), spd_sparse(rng, n))).collect()).unwrap()
    }

    fn projected_from(a: Vec<DMatrix<f64>>, b: Vec<DMatrix<f64>>) -> ProjectedOperator<f64> {
        let s = a[0].nrows();
        ProjectedOperator {
            a_pl: a.clone(),
            b_pr: b.clone(),
            a,
            b,
            pl: DMatrix::identity(s, s),
            pr: DMatrix::identity(s, s),
        }
    }

    #[test]
    fn identity_terms_project_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let op = MultitermOperator::from_pairs(vec![(SparseSymMatrix::identity(10), SparseSymMatrix::identity(9))])
            .unwrap();
        let pl = orthonormal_columns(&rd(&mut rng, 10, 3));
        let pr = orthonormal_columns(&rd(&mut rng, 9, 3));
        let po = project_operator(&op, &pl, &pr).unwrap();
        assert!((&po.a[0] - DMatrix::<f64>::identity(3, 3)).norm() < 1e-14);
    }

    #[test]
    fn one_dimensional_subspace_gives_rayleigh_quotients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let op = spd_op(&mut rng, 12, 2);
        let p = orthonormal_columns(&rd(&mut rng, 12, 1));
        let po = project_operator(&op, &p, &p).unwrap();
        for i in 0..2 {
            let a = op.left_matrix(i).to_dense();
            let expect = (p.transpose() * a * &p)[(0, 0)];
            assert!((po.a[i][(0, 0)] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn projection_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let op = spd_op(&mut rng, 20, 3);
        let pl = orthonormal_columns(&rd(&mut rng, 20, 3));
        let pr = orthonormal_columns(&rd(&mut rng, 20, 3));
        let po = project_operator(&op, &pl, &pr).unwrap();
        for i in 0..3 {
            let e = pl.transpose() * op.left_matrix(i).to_dense() * &pl;
            assert!((&po.a[i] - &e).norm() <= 1e-13 * e.norm());
            let e = pr.transpose() * op.right_matrix(i).to_dense() * &pr;
            assert!((&po.b[i] - &e).norm() <= 1e-13 * e.norm());
        }
        assert!(project_operator(&op, &pl, &pr.columns(0, 2).into_owned()).is_err());
    }

    #[test]
    fn hessian_examples() {
        let po = projected_from(vec![DMatrix::identity(2, 2)], vec![DMatrix::identity(2, 2)]);
        let h = assemble_hessian(&po).unwrap();
        let rhs = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert!((h.solve(&rhs) - &rhs).norm() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<_> = (0..2).map(|_| spd_small(&mut rng, 2)).collect();
        let b: Vec<_> = (0..2).map(|_| spd_small(&mut rng, 2)).collect();
        let brute = b[0].kronecker(&a[0]) + b[1].kronecker(&a[1]);
        assert!((kron_sum(&a, &b) - brute).norm() < 1e-14);

        let mut bad = DMatrix::identity(2, 2);
        bad[(0, 0)] = -5.0;
        let po = projected_from(vec![bad], vec![DMatrix::identity(2, 2)]);
        assert!(matches!(assemble_hessian(&po), Err(Error::IndefiniteHessian { .. })));
    }

    #[test]
    fn hessian_size_cap() {
        let po = projected_from(vec![DMatrix::identity(65, 65)], vec![DMatrix::identity(65, 65)]);
        let err = assemble_hessian(&po).unwrap_err();
        assert!(err.to_string().contains("lower maxrank"), "{err}");
    }

    #[test]
    fn alpha_examples() {
        let po = projected_from(vec![DMatrix::identity(3, 3)], vec![DMatrix::identity(3, 3)]);
        let h = assemble_hessian(&po).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rhs = rd(&mut rng, 3, 3);
        assert!((solve_alpha(&h, &po, &rhs).unwrap().coeff - &rhs).norm() < 1e-15);
        assert_eq!(solve_alpha(&h, &po, &DMatrix::zeros(3, 3)).unwrap().coeff, DMatrix::zeros(3, 3));

        let a: Vec<_> = (0..3).map(|_| spd_small(&mut rng, 3)).collect();
        let b: Vec<_> = (0..3).map(|_| spd_small(&mut rng, 3)).collect();
        let brute = kron_sum(&a, &b);
        let po = projected_from(a, b);
        let h = assemble_hessian(&po).unwrap();
        let sol = solve_alpha(&h, &po, &rhs).unwrap();
        let expect = unvec(&brute.lu().solve(&vec_of(&rhs)).unwrap(), 3, 3);
        assert!((&sol.coeff - &expect).norm() <= 1e-12 * expect.norm());
        assert!(sol.residual_norm <= 1e-12 * rhs.norm());
    }

    fn random_z(rng: &mut ChaCha8Rng, n: usize, r: usize) -> LowRankTriple<f64> {
        LowRankTriple::new(orthonormal_columns(&rd(rng, n, r)), rd(rng, r, r), orthonormal_columns(&rd(rng, n, r)))
            .unwrap()
    }

    #[test]
    fn beta_of_zero_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let op = spd_op(&mut rng, 10, 2);
        let p = orthonormal_columns(&rd(&mut rng, 10, 2));
        let po = project_operator(&op, &p, &p).unwrap();
        let h = assemble_hessian(&po).unwrap();
        let b = solve_beta(&h, &po, &LowRankTriple::zero(10, 10), BetaVariant::Derivation).unwrap();
        assert_eq!(b.coeff, DMatrix::zeros(2, 2));
    }

    #[test]
    fn beta_vanishes_for_l_orthogonal_z() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let op = spd_op(&mut rng, 12, 2);
        let pl = orthonormal_columns(&rd(&mut rng, 12, 2));
        let pr = orthonormal_columns(&rd(&mut rng, 12, 2));
        let po = project_operator(&op, &pl, &pr).unwrap();
        let h = assemble_hessian(&po).unwrap();
        // Remove the P-subspace component of L(Z) by a Galerkin correction.
        let z0 = random_z(&mut rng, 12, 2);
        let corr = h.solve(&po.project_image(&z0));
        let zd = z0.to_dense() - &pl * corr * pr.transpose();
        let z = LowRankTriple::from_outer(&DMatrix::identity(12, 12), &zd, &DMatrix::identity(12, 12)).unwrap();
        let b = solve_beta(&h, &po, &z, BetaVariant::Derivation).unwrap();
        assert!(b.coeff.norm() <= 1e-12 * zd.norm(), "{}", b.coeff.norm());
    }

    #[test]
    fn new_direction_is_l_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let op = spd_op(&mut rng, 14, 2);
        let pl = orthonormal_columns(&rd(&mut rng, 14, 2));
        let pr = orthonormal_columns(&rd(&mut rng, 14, 2));
        let po = project_operator(&op, &pl, &pr).unwrap();
        let h = assemble_hessian(&po).unwrap();
        let z = random_z(&mut rng, 14, 3);
        let beta = solve_beta(&h, &po, &z, BetaVariant::Derivation).unwrap().coeff;
        let p_new = z.to_dense() + &pl * &beta * pr.transpose();
        let lp = op.apply_dense(&p_new);
        let proj = pl.transpose() * &lp * &pr;
        assert!(proj.norm() <= 1e-11 * lp.norm(), "{}", proj.norm());
        // The factored image agrees with the dense one.
        let img = apply_operator_factored(&op, &z).unwrap().to_dense();
        assert!((pl.transpose() * img * &pr - po.project_image(&z)).norm() < 1e-12);
    }

    #[test]
    fn printed_variant_uses_projection_of_z() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let op = spd_op(&mut rng, 10, 2);
        let p = orthonormal_columns(&rd(&mut rng, 10, 2));
        let po = project_operator(&op, &p, &p).unwrap();
        let h = assemble_hessian(&po).unwrap();
        let z = random_z(&mut rng, 10, 2);
        let b = solve_beta(&h, &po, &z, BetaVariant::Printed).unwrap().coeff;
        let rhs = p.transpose() * z.to_dense() * &p;
        assert!((po.apply(&b) - rhs).norm() < 1e-12);
        assert_eq!("printed".parse::<BetaVariant>().unwrap(), BetaVariant::Printed);
    }
}
