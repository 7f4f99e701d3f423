use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use sscg_core::bench::{self, Method, Overrides, ProblemSpec, SolverSettings};
use sscg_core::precond::{PrecondKind, ShiftRecipe};
use sscg_core::problems::{read_problem_dir, write_problem_dir, Decay, GammaKind};
use sscg_core::reduced::BetaVariant;
use sscg_core::solver::Status;
use sscg_core::{LowRankTriple, ResidualStrategy};

#[derive(Parser)]
#[command(name = "sscg", version, about = "Low-rank CG solvers for multiterm matrix equations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a built-in problem to a directory.
    Generate {
        #[command(subcommand)]
        problem: ProblemArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve a problem directory and write the iterate and convergence CSVs.
    Solve {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long, default_value = "sscg")]
        method: Method,
        /// Initial guess checkpoint.
        #[arg(long)]
        x0: Option<PathBuf>,
        #[arg(long, env = "SSCG_OUTPUT_DIR", default_value = "sscg-output")]
        out: PathBuf,
        #[command(flatten)]
        solver: SolverFlags,
    },
    /// Run an experiment config.
    Bench {
        config: PathBuf,
        /// Replaces the configured output directory.
        #[arg(long, env = "SSCG_OUTPUT_DIR")]
        out: Option<PathBuf>,
        #[command(flatten)]
        solver: SolverFlags,
    },
    /// Print the true relative residual of a checkpointed iterate.
    Validate {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        x: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum ProblemArg {
    DiffusionReaction {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "sin")]
        gamma: GammaKind,
    },
    Heat1 {
        #[arg(long, default_value_t = 64)]
        n0: usize,
        #[arg(long, default_value_t = 0.5)]
        delta: f64,
    },
    SyntheticKl {
        #[arg(long)]
        n_a: usize,
        #[arg(long)]
        n_b: usize,
        #[arg(long, default_value_t = 10)]
        terms: usize,
        #[arg(long, default_value = "fast")]
        decay: Decay,
        #[arg(long, default_value_t = 0.3)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

impl From<ProblemArg> for ProblemSpec {
    fn from(p: ProblemArg) -> Self {
        match p {
            ProblemArg::DiffusionReaction { n, gamma } => ProblemSpec::DiffusionReaction { n, gamma },
            ProblemArg::Heat1 { n0, delta } => ProblemSpec::Heat1 { n0, delta },
            ProblemArg::SyntheticKl { n_a, n_b, terms, decay, sigma, seed } => {
                ProblemSpec::SyntheticKl { n_a, n_b, terms, decay, sigma, seed }
            }
        }
    }
}

#[derive(Args, Default)]
struct SolverFlags {
    #[arg(long)]
    maxrank: Option<usize>,
    #[arg(long)]
    tolrank: Option<f64>,
    #[arg(long)]
    maxrank_r: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    maxit: Option<usize>,
    /// none, p1 or p2.
    #[arg(long)]
    precond: Option<PrecondKind>,
    #[arg(long)]
    t_adi: Option<usize>,
    /// geometric or elliptic ADI shifts.
    #[arg(long)]
    shifts: Option<ShiftRecipe>,
    /// full, dynamic or randomized.
    #[arg(long)]
    residual: Option<ResidualStrategy>,
    #[arg(long)]
    seed: Option<u64>,
    /// derivation or printed.
    #[arg(long)]
    beta_variant: Option<BetaVariant>,
}

impl SolverFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            tolrank: self.tolrank,
            maxrank_r: self.maxrank_r,
            maxit: self.maxit,
            precond: self.precond,
            t_adi: self.t_adi,
            shifts: self.shifts,
            truncate_adi_steps: None,
            residual: self.residual,
            beta_variant: self.beta_variant,
        }
    }

    fn settings(&self) -> SolverSettings {
        let mut s = SolverSettings::default();
        if let Some(m) = self.maxrank {
            s.maxrank = m;
        }
        if let Some(t) = self.tol {
            s.tol = t;
        }
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        self.overrides().apply(&mut s);
        s
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate { problem, out } => {
            let spec = ProblemSpec::from(problem);
            let p = spec.generate()?;
            write_problem_dir(&p, &out)?;
            println!("wrote {} ({}x{}, {} terms) to {}", p.name, p.operator.n_a(), p.operator.n_b(), p.operator.num_terms(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Solve { problem, method, x0, out, solver } => solve(&problem, method, x0.as_deref(), &out, &solver),
        Command::Bench { config, out, solver } => {
            let mut cfg = bench::ExperimentConfig::load(&config)?;
            cfg.pin(solver.maxrank, solver.tol);
            if let Some(seed) = solver.seed {
                cfg.seed = seed;
            }
            let res = bench::run_experiment_config(&cfg, &solver.overrides(), out.as_deref())?;
            println!("{:<24} {:<6} {:>7} {:>9} {:>6} {:>14} {:>9}", "case", "method", "maxrank", "tol", "iters", "true relres", "seconds");
            for r in &res.rows {
                let relres = r.final_true_relres.map(|c| format!("{:.3e}{}", c.value, if c.estimated { "*" } else { "" }));
                println!(
                    "{:<24} {:<6} {:>7} {:>9.1e} {:>6} {:>14} {:>9.2}",
                    r.case,
                    r.method.to_string(),
                    r.maxrank,
                    r.tol,
                    r.iterations_field(),
                    relres.unwrap_or_default(),
                    r.seconds
                );
            }
            println!("results: {}", res.results_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { problem, x, seed } => {
            let p = read_problem_dir(&problem)?;
            let x = LowRankTriple::read_checkpoint(&x)?;
            let check = bench::validate_solution(&p, &x, seed)?;
            if check.estimated {
                println!("relative residual (estimated): {:e}", check.value);
            } else {
                println!("relative residual: {:e}", check.value);
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn solve(problem: &Path, method: Method, x0: Option<&Path>, out: &Path, flags: &SolverFlags) -> Result<ExitCode> {
    let p = read_problem_dir(problem)?;
    let cfg = flags.settings().build(&p)?;
    let x0 = x0.map(LowRankTriple::read_checkpoint).transpose()?;
    let (x, report) = bench::run_solver(method, &p, &cfg, x0.as_ref())?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    x.write_checkpoint(&out.join("x.lr"))?;
    report.write_iterations_csv(&out.join("iterations.csv"))?;
    report.write_summary_csv(&out.join("summary.csv"))?;
    println!("{method}: {} after {} iterations", report.status, report.iterations());
    if let Some(c) = report.final_true_relres {
        println!("true relative residual{}: {:e}", if c.estimated { " (estimated)" } else { "" }, c.value);
    }
    for a in &report.annotations {
        println!("note: {a}");
    }
    Ok(match report.status {
        Status::Converged => ExitCode::SUCCESS,
        Status::MaxIterations => ExitCode::from(2),
        Status::ReducedSolveFailure => {
            eprintln!("error: {}", report.failure.as_deref().unwrap_or("reduced solve failed"));
            ExitCode::from(1)
        }
    })
}
