//! Experiment harness: TOML-described parameter sweeps over the built-in
//! problems, with per-run convergence CSVs and a combined results table.
//!
//! ```toml
//! name = "diffusion"
//! methods = ["sscg", "tpcg"]
//! output_dir = "out"
//! seed = 7
//!
//! [problem]
//! kind = "diffusion_reaction"
//! n = 2000
//! gamma = "sin"
//!
//! [solver]
//! precond = "p2"
//! t_adi = 8
//!
//! [overrides.tpcg]
//! maxit = 300
//!
//! [sweep]
//! maxrank = [20, 30]
//! tol = [1e-6]
//! ```
//!
//! Instead of `[sweep]`, a list of `[[cases]]` tables (each with `maxrank`,
//! `tol`, an optional `name` and an optional `problem`) may be given.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::LowRankTriple;
use crate::precond::{PrecondKind, PreconditionerSpec, ShiftRecipe};
use crate::problems::{gen_diffusion_reaction, gen_heat1, gen_synthetic_kl, read_problem_dir, Decay, GammaKind, ProblemInstance};
use crate::reduced::BetaVariant;
use crate::solver::{solve_sscg, true_relative_residual, ConvergenceReport, ResidualCheck, SolverConfig, Status};
use crate::tpcg::solve_tpcg;
use crate::truncation::{ResidualStrategy, TruncationParams};

/// Version of the results table layout.
pub const SCHEMA_VERSION: u32 = 1;

pub const RESULT_COLUMNS: [&str; 9] =
    ["schema_version", "case", "method", "maxrank", "tol", "status", "iterations", "final_true_relres", "seconds"];

pub const RESULTS_FILE: &str = "results.csv";

/// Marker written in place of an iteration count when the cap was reached.
pub const NO_CONVERGENCE: &str = "--";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    DiffusionReaction {
        n: usize,
        gamma: GammaKind,
    },
    Heat1 {
        n0: usize,
        delta: f64,
    },
    SyntheticKl {
        n_a: usize,
        n_b: usize,
        terms: usize,
        decay: Decay,
        sigma: f64,
        #[serde(default)]
        seed: u64,
    },
    /// A directory written by `write_problem_dir`.
    Directory {
        path: PathBuf,
    },
}

impl ProblemSpec {
    pub fn generate(&self) -> Result<ProblemInstance<f64>> {
        match self {
            Self::DiffusionReaction { n, gamma } => gen_diffusion_reaction(*n, *gamma),
            Self::Heat1 { n0, delta } => gen_heat1(*n0, *delta),
            Self::SyntheticKl { n_a, n_b, terms, decay, sigma, seed } => {
                gen_synthetic_kl(*n_a, *n_b, *terms, *decay, *sigma, *seed)
            }
            Self::Directory { path } => read_problem_dir(path),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sscg,
    Tpcg,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sscg => "sscg",
            Self::Tpcg => "tpcg",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sscg" => Ok(Self::Sscg),
            "tpcg" => Ok(Self::Tpcg),
            other => Err(Error::InvalidParameter(format!("unknown method `{other}` (expected sscg or tpcg)"))),
        }
    }
}

/// Fully resolved solver parameters, independent of the scalar type.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    pub maxrank: usize,
    pub tol: f64,
    pub tolrank: f64,
    /// Defaults to `2 * maxrank`.
    pub maxrank_r: Option<usize>,
    pub maxit: usize,
    pub precond: PrecondKind,
    pub t_adi: usize,
    pub shifts: ShiftRecipe,
    pub truncate_adi_steps: bool,
    pub residual: ResidualStrategy,
    pub seed: u64,
    pub beta_variant: BetaVariant,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            maxrank: 20,
            tol: 1e-6,
            tolrank: 1e-12,
            maxrank_r: None,
            maxit: 100,
            precond: PrecondKind::P2,
            t_adi: 8,
            shifts: ShiftRecipe::Geometric,
            truncate_adi_steps: false,
            residual: ResidualStrategy::Full,
            seed: 0,
            beta_variant: BetaVariant::Derivation,
        }
    }
}

impl SolverSettings {
    pub fn build(&self, problem: &ProblemInstance<f64>) -> Result<SolverConfig<f64>> {
        let maxrank_r = self.maxrank_r.unwrap_or(2 * self.maxrank);
        let truncation = TruncationParams::with_residual_cap(self.tolrank, self.maxrank, maxrank_r)?;
        let mut cfg = SolverConfig::new(self.tol, self.maxit, truncation);
        cfg.residual_strategy = self.residual;
        cfg.seed = self.seed;
        cfg.beta_variant = self.beta_variant;
        cfg.precond = PreconditionerSpec::from_operator(&problem.operator, self.precond, self.t_adi)?;
        if let PreconditionerSpec::TwoTermAdi { recipe, truncate_steps, .. } = &mut cfg.precond {
            *recipe = self.shifts;
            *truncate_steps = self.truncate_adi_steps;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Optional solver fields; unset fields leave the underlying value alone.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub tolrank: Option<f64>,
    pub maxrank_r: Option<usize>,
    pub maxit: Option<usize>,
    pub precond: Option<PrecondKind>,
    pub t_adi: Option<usize>,
    pub shifts: Option<ShiftRecipe>,
    pub truncate_adi_steps: Option<bool>,
    pub residual: Option<ResidualStrategy>,
    pub beta_variant: Option<BetaVariant>,
}

impl Overrides {
    pub fn apply(&self, s: &mut SolverSettings) {
        if let Some(v) = self.tolrank {
            s.tolrank = v;
        }
        if let Some(v) = self.maxrank_r {
            s.maxrank_r = Some(v);
        }
        if let Some(v) = self.maxit {
            s.maxit = v;
        }
        if let Some(v) = self.precond {
            s.precond = v;
        }
        if let Some(v) = self.t_adi {
            s.t_adi = v;
        }
        if let Some(v) = self.shifts {
            s.shifts = v;
        }
        if let Some(v) = self.truncate_adi_steps {
            s.truncate_adi_steps = v;
        }
        if let Some(v) = self.residual {
            s.residual = v;
        }
        if let Some(v) = self.beta_variant {
            s.beta_variant = v;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub maxrank: Vec<usize>,
    pub tol: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Case {
    pub name: Option<String>,
    pub problem: Option<ProblemSpec>,
    pub maxrank: usize,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub problem: Option<ProblemSpec>,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub solver: Overrides,
    #[serde(default)]
    pub overrides: BTreeMap<Method, Overrides>,
    pub sweep: Option<Sweep>,
    #[serde(default)]
    pub cases: Vec<Case>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_output() -> PathBuf {
    PathBuf::from("sscg-output")
}

/// One (case, method) combination of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub case: String,
    pub problem: ProblemSpec,
    pub method: Method,
    pub settings: SolverSettings,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        match (&self.sweep, self.cases.is_empty()) {
            (Some(_), false) => return Err(Error::Config("give either [sweep] or [[cases]], not both".into())),
            (None, true) => return Err(Error::Config("no sweep points: add [sweep] or [[cases]]".into())),
            (Some(s), true) if s.maxrank.is_empty() || s.tol.is_empty() => {
                return Err(Error::Config("sweep lists for maxrank and tol must be non-empty".into()))
            }
            _ => {}
        }
        if self.problem.is_none() {
            if let Some(i) = self.cases.iter().position(|c| c.problem.is_none()) {
                return Err(Error::Config(format!("case {} has no problem and there is no default [problem]", i + 1)));
            }
            if self.sweep.is_some() {
                return Err(Error::Config("[sweep] needs a [problem] table".into()));
            }
        }
        Ok(())
    }

    /// Replaces every sweep point's maxrank and/or tol.
    pub fn pin(&mut self, maxrank: Option<usize>, tol: Option<f64>) {
        if let Some(s) = &mut self.sweep {
            if let Some(m) = maxrank {
                s.maxrank = vec![m];
            }
            if let Some(t) = tol {
                s.tol = vec![t];
            }
        }
        for c in &mut self.cases {
            c.maxrank = maxrank.unwrap_or(c.maxrank);
            c.tol = tol.unwrap_or(c.tol);
        }
    }

    /// Expands sweeps and cases into individual runs, in file order with
    /// methods innermost.
    pub fn runs(&self, cli: &Overrides) -> Vec<RunSpec> {
        let mut points = Vec::new();
        if let Some(s) = &self.sweep {
            let problem = self.problem.clone().expect("validated");
            for &maxrank in &s.maxrank {
                for &tol in &s.tol {
                    points.push((format!("maxrank{maxrank}_tol{tol:e}"), problem.clone(), maxrank, tol));
                }
            }
        }
        for (i, c) in self.cases.iter().enumerate() {
            let name = c.name.clone().unwrap_or_else(|| format!("case{}", i + 1));
            let problem = c.problem.clone().or_else(|| self.problem.clone()).expect("validated");
            points.push((name, problem, c.maxrank, c.tol));
        }
        let mut runs = Vec::new();
        for (case, problem, maxrank, tol) in points {
            for &method in &self.methods {
                let mut settings = SolverSettings { maxrank, tol, seed: self.seed, ..SolverSettings::default() };
                self.solver.apply(&mut settings);
                if let Some(o) = self.overrides.get(&method) {
                    o.apply(&mut settings);
                }
                cli.apply(&mut settings);
                runs.push(RunSpec { case: case.clone(), problem: problem.clone(), method, settings });
            }
        }
        runs
    }
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub case: String,
    pub method: Method,
    pub maxrank: usize,
    pub tol: f64,
    pub status: Status,
    pub iterations: usize,
    pub final_true_relres: Option<ResidualCheck>,
    pub seconds: f64,
}

impl ResultRow {
    /// Iteration count, or `--` when the iteration cap was reached.
    pub fn iterations_field(&self) -> String {
        match self.status {
            Status::MaxIterations => NO_CONVERGENCE.into(),
            _ => self.iterations.to_string(),
        }
    }

    fn record(&self) -> Vec<String> {
        let relres = match self.final_true_relres {
            Some(c) if c.estimated => format!("estimated:{:e}", c.value),
            Some(c) => format!("{:e}", c.value),
            None => String::new(),
        };
        vec![
            SCHEMA_VERSION.to_string(),
            self.case.clone(),
            self.method.to_string(),
            self.maxrank.to_string(),
            format!("{:e}", self.tol),
            self.status.to_string(),
            self.iterations_field(),
            relres,
            format!("{:.3}", self.seconds),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResults {
    pub rows: Vec<ResultRow>,
    pub results_path: PathBuf,
}

pub fn run_solver(
    method: Method,
    problem: &ProblemInstance<f64>,
    cfg: &SolverConfig<f64>,
    x0: Option<&LowRankTriple<f64>>,
) -> Result<(LowRankTriple<f64>, ConvergenceReport)> {
    let zero = LowRankTriple::zero(problem.operator.n_a(), problem.operator.n_b());
    let x0 = x0.unwrap_or(&zero);
    match method {
        Method::Sscg => solve_sscg(&problem.operator, &problem.rhs, x0, cfg),
        Method::Tpcg => solve_tpcg(&problem.operator, &problem.rhs, x0, cfg),
    }
}

/// Loads the config at `path` and runs it; `output_dir` replaces the
/// configured directory when given.
pub fn run_experiment(path: &Path, cli: &Overrides, output_dir: Option<&Path>) -> Result<ExperimentResults> {
    let cfg = ExperimentConfig::load(path)?;
    run_experiment_config(&cfg, cli, output_dir)
}

pub fn run_experiment_config(
    cfg: &ExperimentConfig,
    cli: &Overrides,
    output_dir: Option<&Path>,
) -> Result<ExperimentResults> {
    cfg.validate()?;
    let out = output_dir.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut problems: Vec<(ProblemSpec, ProblemInstance<f64>)> = Vec::new();
    let mut rows = Vec::new();
    for run in cfg.runs(cli) {
        let idx = match problems.iter().position(|(s, _)| *s == run.problem) {
            Some(i) => i,
            None => {
                problems.push((run.problem.clone(), run.problem.generate()?));
                problems.len() - 1
            }
        };
        let problem = &problems[idx].1;
        let solver_cfg = run.settings.build(problem)?;
        let start = Instant::now();
        let (_, report) = run_solver(run.method, problem, &solver_cfg, None)?;
        let seconds = start.elapsed().as_secs_f64();
        let stem = format!("{}_{}_{}", cfg.name, sanitize(&run.case), run.method);
        report.write_iterations_csv(&out.join(format!("{stem}_iterations.csv")))?;
        report.write_summary_csv(&out.join(format!("{stem}_summary.csv")))?;
        rows.push(ResultRow {
            case: run.case,
            method: run.method,
            maxrank: run.settings.maxrank,
            tol: run.settings.tol,
            status: report.status,
            iterations: report.iterations(),
            final_true_relres: report.final_true_relres,
            seconds,
        });
    }
    let results_path = out.join(format!("{}_{RESULTS_FILE}", cfg.name));
    write_results(&rows, &results_path)?;
    Ok(ExperimentResults { rows, results_path })
}

pub fn write_results(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RESULT_COLUMNS)?;
    for row in rows {
        w.write_record(row.record())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

/// `||C - L(X)||_F / ||C||_F`, exact when affordable, estimated otherwise.
pub fn validate_solution(problem: &ProblemInstance<f64>, x: &LowRankTriple<f64>, seed: u64) -> Result<ResidualCheck> {
    true_relative_residual(&problem.operator, &problem.rhs, x, seed)
}
