//! Low-rank subspace conjugate gradient solvers for multiterm linear matrix
//! equations `sum_i A_i X B_i = C` with sparse symmetric coefficients and a
//! low-rank right-hand side.

pub mod bench;
pub mod dense;
pub mod error;
pub mod lowrank;
pub mod matrix_market;
pub mod precond;
pub mod problems;
pub mod reduced;
pub mod scalar;
pub mod solver;
pub mod sparse;
pub mod tpcg;
pub mod truncation;

pub use error::{Error, Result};
pub use lowrank::{
    apply_operator_factored, frob_norm_factored, inner_product_factored, relative_change, BlockFactorization,
    LowRankTriple, MultitermOperator,
};
pub use scalar::Scalar;
pub use sparse::{EnvelopeCholesky, SparseSymMatrix};
pub use truncation::{
    residual_dynamic, residual_full, residual_randomized, truncate_qrsvd, ResidualStrategy, SketchPair,
    TruncationParams, Truncated,
};
pub use bench::{run_experiment, validate_solution, ExperimentConfig, Method, ProblemSpec};
pub use precond::{PrecondKind, PreconditionerSpec, ShiftRecipe};
pub use problems::{dense_kron_solve, gen_diffusion_reaction, gen_heat1, gen_synthetic_kl, ProblemInstance};
pub use reduced::BetaVariant;
pub use solver::{solve_sscg, solve_sscg_symmetric, ConvergenceReport, SolverConfig, Status};
pub use tpcg::solve_tpcg;

pub type LowRankTriple64 = LowRankTriple<f64>;
pub type LowRankTriple32 = LowRankTriple<f32>;
pub type MultitermOperator64 = MultitermOperator<f64>;
pub type MultitermOperator32 = MultitermOperator<f32>;
pub type SparseSymMatrix64 = SparseSymMatrix<f64>;
pub type SparseSymMatrix32 = SparseSymMatrix<f32>;
pub type SolverConfig64 = SolverConfig<f64>;
pub type SolverConfig32 = SolverConfig<f32>;
pub type ProblemInstance64 = ProblemInstance<f64>;
