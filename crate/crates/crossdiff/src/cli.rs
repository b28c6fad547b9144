//! Command dispatch: one job per invocation, deterministic artifacts.
//!
//! Exit codes: 0 success, 2 configuration error, 3 spread condition
//! violated, 4 numerical failure. Everything an invocation produces is a
//! pure function of the config bytes and the resolved seed.

use crate::analysis::{self, AnalysisError};
use crate::coefficients::CoefficientSet;
use crate::config::{parse_config, ConfigError, SimulationConfig};
use crate::fields::{FieldError, Grid, StateField};
use crate::lattice::{self, LatticeError};
use crate::output::{self, CoefficientSummary, RunMetadata};
use crate::solver::{self, SolverError};
use clap::{Parser, Subcommand};
use serde_json::json;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(
    name = "crossdiff",
    version,
    about = "Volume-filling cross-diffusion lab"
)]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's lattice seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Suppress progress lines on stdout.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Print derived rate constants and the spread-condition verdict.
    CheckCoefficients,
    /// Advance the macroscopic system and write snapshots + diagnostics.
    RunPde,
    /// Run the lattice ensemble and write mean/stderr fields.
    RunLattice,
    /// Run the lattice ensemble and its matched solve, write both.
    Compare,
    /// Run base and perturbed trajectories and check the stability bound.
    Stability,
    /// Mesh and step refinement study for the equal-rates case.
    Convergence,
}

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("spread condition violated: {0}")]
    Assumption(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Assumption(_) => 3,
            AppError::Numerical(_) | AppError::Io(_) => 4,
        }
    }

    /// Stable error-class name for scripts.
    pub fn class(&self) -> &'static str {
        match self {
            AppError::Config(_) => "config-error",
            AppError::Assumption(_) => "assumption-violated",
            AppError::Numerical(_) => "numerical-failure",
            AppError::Io(_) => "io-error",
        }
    }
}

impl From<SolverError> for AppError {
    fn from(err: SolverError) -> Self {
        match err {
            SolverError::AssumptionViolated { .. } => AppError::Assumption(err.to_string()),
            SolverError::InvalidConfig(msg) => AppError::Config(ConfigError::Validation(msg)),
            other => AppError::Numerical(other.to_string()),
        }
    }
}

impl From<LatticeError> for AppError {
    fn from(err: LatticeError) -> Self {
        match err {
            LatticeError::UnsupportedDimension(_)
            | LatticeError::SpeciesMismatch { .. }
            | LatticeError::TooFewSites
            | LatticeError::InvalidOptions(_)
            | LatticeError::Field(_) => AppError::Config(ConfigError::Validation(err.to_string())),
            other => AppError::Numerical(other.to_string()),
        }
    }
}

impl From<AnalysisError> for AppError {
    fn from(err: AnalysisError) -> Self {
        match err {
            AnalysisError::AssumptionViolated { .. } => AppError::Assumption(err.to_string()),
            AnalysisError::InsufficientMeshes { .. } | AnalysisError::NotRefining { .. } => {
                AppError::Config(ConfigError::Validation(err.to_string()))
            }
            other => AppError::Numerical(other.to_string()),
        }
    }
}

impl From<FieldError> for AppError {
    fn from(err: FieldError) -> Self {
        AppError::Config(ConfigError::Validation(err.to_string()))
    }
}

struct Job {
    config: SimulationConfig,
    coefficients: CoefficientSet,
    seed: u64,
    out_dir: PathBuf,
    quiet: bool,
}

/// Writes a stdout line, swallowing broken pipes so `crossdiff ... | head`
/// exits quietly instead of panicking.
fn emit(line: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{line}");
}

impl Job {
    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            emit(line.as_ref());
        }
    }

    fn metadata(&self, command: &'static str, details: serde_json::Value) -> RunMetadata<'_> {
        RunMetadata {
            command,
            seed: self.seed,
            coefficients: CoefficientSummary::from_set(&self.coefficients),
            config: &self.config,
            details,
        }
    }
}

pub fn dispatch(cli: &Cli) -> Result<(), AppError> {
    let config_path = cli
        .config
        .as_deref()
        .ok_or_else(|| ConfigError::Validation("--config PATH is required".into()))?;
    let config = parse_config(config_path)?;
    let coefficients = config.coefficient_set()?;
    let seed = cli.seed.unwrap_or(config.lattice.seed);
    let out_dir = cli.out.clone().unwrap_or_else(|| config.output.dir.clone());
    let job = Job {
        config,
        coefficients,
        seed,
        out_dir,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::CheckCoefficients => check_coefficients(&job),
        Command::RunPde => run_pde(&job),
        Command::RunLattice => run_lattice(&job, false),
        Command::Compare => run_lattice(&job, true),
        Command::Stability => stability(&job),
        Command::Convergence => convergence(&job),
    }
}

fn ensure_out(job: &Job) -> Result<(), AppError> {
    std::fs::create_dir_all(&job.out_dir)?;
    Ok(())
}

fn check_coefficients(job: &Job) -> Result<(), AppError> {
    let summary = CoefficientSummary::from_set(&job.coefficients);
    emit(&format!("n={}", summary.n));
    emit(&format!("k_plus={}", summary.k_plus));
    emit(&format!("k_minus={}", summary.k_minus));
    emit(&format!("k_mean={}", summary.k_mean));
    emit(&format!("kappa={}", summary.kappa));
    emit(&format!("alpha={}", summary.alpha));
    emit(&format!("margin={}", summary.margin));
    emit(&format!("contraction={}", summary.contraction_factor));
    emit(&format!(
        "verdict={}",
        if summary.spread_holds {
            "holds"
        } else {
            "fails"
        }
    ));
    Ok(())
}

fn run_pde(job: &Job) -> Result<(), AppError> {
    ensure_out(job)?;
    let grid = job.config.grid()?;
    let initial = job.config.initial_state(&grid)?;
    let cfg = job.config.solver_config(&grid, &job.coefficients);
    let result = solver::run(&initial, &job.coefficients, &cfg, &job.config.output.times)?;

    for (index, state) in result.trajectory.states.iter().enumerate() {
        output::write_snapshot_csv(&job.out_dir.join(format!("pde_{index:03}.csv")), state)?;
    }
    output::write_diagnostics_csv(&job.out_dir.join("diagnostics.csv"), &result.diagnostics)?;

    let apriori = analysis::apriori_check(&result, &job.coefficients)?;
    let max_entropy_increment = result
        .diagnostics
        .rows
        .iter()
        .skip(1)
        .map(|r| r.entropy_increment)
        .fold(f64::NEG_INFINITY, f64::max);
    let worst_sum = result
        .diagnostics
        .rows
        .iter()
        .map(|r| r.max_sum_deviation)
        .fold(0.0f64, f64::max);
    let min_value = result
        .diagnostics
        .rows
        .iter()
        .map(|r| r.min_value)
        .fold(f64::INFINITY, f64::min);
    let max_ratio = result
        .steps
        .iter()
        .flat_map(|s| s.ratios.iter().copied())
        .fold(0.0f64, f64::max);
    let total_sweeps: usize = result.steps.iter().map(|s| s.residuals.len()).sum();
    let max_sweeps = result
        .steps
        .iter()
        .map(|s| s.residuals.len())
        .max()
        .unwrap_or(0);
    let details = json!({
        "snapshot_times": result.trajectory.times(),
        "steps": result.steps.len(),
        "picard": {
            "total_sweeps": total_sweeps,
            "max_sweeps": max_sweeps,
            "mean_sweeps": total_sweeps as f64 / result.steps.len().max(1) as f64,
            "max_ratio": max_ratio,
        },
        "dt": cfg.dt,
        "max_sum_deviation": worst_sum,
        "min_value": min_value,
        "max_entropy_increment": max_entropy_increment,
        "apriori": output::apriori_json(&apriori),
    });
    output::write_metadata(
        &job.out_dir.join("metadata.json"),
        &job.metadata("run-pde", details),
    )?;
    job.say(format!(
        "run-pde: {} steps, {} snapshots, max sum deviation {:.3e}, entropy increment max {:.3e}",
        result.steps.len(),
        result.trajectory.states.len(),
        worst_sum,
        max_entropy_increment,
    ));
    Ok(())
}

fn run_lattice(job: &Job, with_pde: bool) -> Result<(), AppError> {
    ensure_out(job)?;
    let grid = job.config.lattice_grid()?;
    let initial = job.config.initial_state(&grid)?;
    let opts = job
        .config
        .ensemble_options(&grid, &job.coefficients, Some(job.seed));
    let result = lattice::run_ensemble(&initial, &job.coefficients, &opts)?;
    output::write_ensemble_csv(&job.out_dir, &result)?;
    if with_pde {
        for (index, state) in result.pde.states.iter().enumerate() {
            output::write_snapshot_csv(&job.out_dir.join(format!("pde_{index:03}.csv")), state)?;
        }
    }
    let final_rel = result.discrepancy.last().map(|r| r.l2_rel);
    let details = json!({
        "times": result.times,
        "runs": result.runs,
        "lattice_dt": opts.dt,
        "run_seeds": result.run_seeds,
        "discrepancy": result.discrepancy,
        "final_l2_rel": final_rel,
    });
    let command = if with_pde { "compare" } else { "run-lattice" };
    output::write_metadata(
        &job.out_dir.join("metadata.json"),
        &job.metadata(command, details),
    )?;
    job.say(format!(
        "{command}: {} members, {} observation times, final relative L2 discrepancy {:.4}",
        result.runs,
        result.times.len(),
        final_rel.unwrap_or(f64::NAN),
    ));
    Ok(())
}

/// Cosine perturbation on one species, compensated on another so the sums
/// are untouched.
fn perturb(
    base: &StateField,
    grid: &Grid,
    length: f64,
    spec: &crate::config::StabilitySpec,
    tol: crate::fields::ConstraintTolerances,
) -> Result<StateField, AppError> {
    let mut fields: Vec<Vec<f64>> = base.fields().to_vec();
    let omega = spec.mode as f64 * std::f64::consts::PI / length;
    for iy in 0..grid.ny() {
        for ix in 0..grid.nx() {
            let cell = grid.index(ix, iy);
            let delta = spec.amplitude * (omega * grid.x_center(ix)).cos();
            fields[spec.species][cell] += delta;
            fields[spec.compensate][cell] -= delta;
        }
    }
    Ok(StateField::new(*grid, fields, base.time(), tol)?)
}

fn stability(job: &Job) -> Result<(), AppError> {
    ensure_out(job)?;
    let grid = job.config.grid()?;
    let base = job.config.initial_state(&grid)?;
    let perturbed = perturb(
        &base,
        &grid,
        job.config.grid.length,
        &job.config.stability,
        job.config.tolerances(),
    )?;
    let cfg = job.config.solver_config(&grid, &job.coefficients);
    let times = &job.config.output.times;
    let run_a = solver::run(&base, &job.coefficients, &cfg, times)?;
    let run_b = solver::run(&perturbed, &job.coefficients, &cfg, times)?;
    let report =
        analysis::stability_check(&run_a.trajectory, &run_b.trajectory, &job.coefficients)?;
    output::write_stability_csv(&job.out_dir.join("stability.csv"), &report)?;
    let details = json!({
        "c_prime": report.c_prime,
        "verdict": report.verdict,
        "worst_margin": report.worst_margin,
        "perturbation": job.config.stability,
        // The bound is proved in one dimension; higher-dimensional runs are
        // executed but labeled.
        "exploratory": grid.dim() != 1,
    });
    output::write_metadata(
        &job.out_dir.join("metadata.json"),
        &job.metadata("stability", details),
    )?;
    job.say(format!(
        "stability: verdict {:?}, C' = {:.6}, worst margin {:.3e}",
        report.verdict, report.c_prime, report.worst_margin,
    ));
    Ok(())
}

fn convergence(job: &Job) -> Result<(), AppError> {
    ensure_out(job)?;
    let spec = &job.config.convergence;
    let length = job.config.grid.length;
    let rate = spec.rate.unwrap_or(job.coefficients.k_mean());
    let mode = spec.mode.max(1) as f64;
    let t_end = spec.t_end;
    let omega = mode * std::f64::consts::PI / length;
    let decay = (-rate * omega * omega * t_end).exp();
    let exact = |x: f64| 0.5 + 0.3 * (omega * x).cos() * decay;

    // Spatial study: dt scales with h^2 so the first-order time error
    // refines at the same second-order rate as the stencil.
    let coarse_steps = 50.0;
    let base_cells = *spec
        .cells
        .first()
        .ok_or_else(|| ConfigError::Validation("convergence.cells must not be empty".into()))?
        as f64;
    let mut spatial_rows = Vec::new();
    for &cells in &spec.cells {
        let grid = Grid::line(cells, length / cells as f64)?;
        let dt = (t_end / coarse_steps) * (base_cells / cells as f64).powi(2);
        let initial: Vec<f64> = (0..cells)
            .map(|i| 0.5 + 0.3 * (omega * grid.x_center(i)).cos())
            .collect();
        let out = solver::heat_reference(&initial, rate, &grid, dt, t_end)?;
        let err = (0..cells)
            .map(|i| (out[i] - exact(grid.x_center(i))).abs())
            .fold(0.0f64, f64::max);
        spatial_rows.push((grid.h(), err));
    }
    let spatial = analysis::convergence_study(&spatial_rows)?;

    // Temporal study: finest mesh, steps halving.
    let cells = *spec.cells.last().expect("checked non-empty above");
    let grid = Grid::line(cells, length / cells as f64)?;
    let initial: Vec<f64> = (0..cells)
        .map(|i| 0.5 + 0.3 * (omega * grid.x_center(i)).cos())
        .collect();
    let mut temporal_rows = Vec::new();
    for &dt in &spec.dts {
        let out = solver::heat_reference(&initial, rate, &grid, dt, t_end)?;
        let err = (0..cells)
            .map(|i| (out[i] - exact(grid.x_center(i))).abs())
            .fold(0.0f64, f64::max);
        temporal_rows.push((dt, err));
    }
    let temporal = analysis::convergence_study(&temporal_rows)?;

    output::write_convergence_csv(&job.out_dir.join("convergence_spatial.csv"), &spatial)?;
    output::write_convergence_csv(&job.out_dir.join("convergence_temporal.csv"), &temporal)?;
    let details = json!({
        "rate": rate,
        "t_end": t_end,
        "spatial_orders": spatial.orders,
        "temporal_orders": temporal.orders,
    });
    output::write_metadata(
        &job.out_dir.join("metadata.json"),
        &job.metadata("convergence", details),
    )?;
    job.say(format!(
        "convergence: spatial order {:.3}, temporal order {:.3}",
        spatial.finest_order(),
        temporal.finest_order(),
    ));
    Ok(())
}

/// Entry point shared by `main` and the CLI tests.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return 2;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error[{}]: {}", err.class(), err);
            err.exit_code()
        }
    }
}
