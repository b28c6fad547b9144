//! Run configuration: a single TOML file, validated and materialized.
//!
//! Every default is filled in at parse time so the config echoed into run
//! metadata is complete; re-parsing the echo reproduces the same struct.
//! Rate matrices are stated as unordered pairs, each exactly once.

use crate::coefficients::{matrix_from_pairs, CoefficientSet};
use crate::fields::{ConstraintTolerances, FieldError, Grid, StateField};
use crate::lattice::EnsembleOptions;
use crate::solver::SolverConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Validation(String),
}

fn invalid(detail: impl Into<String>) -> ConfigError {
    ConfigError::Validation(detail.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientsSpec {
    /// Species count excluding the solvent.
    pub n: usize,
    /// Unordered pairs `[i, j, rate]`, each stated exactly once.
    pub pairs: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Cells per axis; the array length sets the dimension (1 or 2).
    pub cells: Vec<usize>,
    /// Domain length along x; the spacing is `length / cells[0]` and is
    /// shared by every axis.
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialSpec {
    /// Constant fractions for species 1..=n; the solvent takes the rest.
    Uniform { fractions: Vec<f64> },
    /// Tanh ramp along x between per-species left and right fractions.
    /// Smooth by construction, so gradients stay bounded on refinement.
    SmoothedStep {
        left: Vec<f64>,
        right: Vec<f64>,
        center: Option<f64>,
        width: f64,
    },
    /// Per-species cosine mode on top of constant fractions.
    CosineMixture {
        base: Vec<f64>,
        amplitudes: Vec<f64>,
        modes: Vec<usize>,
    },
    /// Snapshot CSV with the same schema the solver writes.
    FromFile { path: PathBuf },
}

fn default_t_end() -> f64 {
    1.0
}
fn default_picard_tol() -> f64 {
    1e-10
}
fn default_picard_max() -> usize {
    50
}
fn default_theta() -> f64 {
    1.0
}
fn default_flux_form() -> bool {
    true
}
fn default_tol_sum() -> f64 {
    crate::fields::DEFAULT_TOL_SUM
}
fn default_tol_neg() -> f64 {
    crate::fields::DEFAULT_TOL_NEG
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSpec {
    /// Time step. Defaults to `h` for fully implicit coupling (theta = 1,
    /// where the implicit core tolerates it and coupling accuracy is the
    /// limit) and to `0.5 h^2 / K+` otherwise.
    pub dt: Option<f64>,
    pub t_end: f64,
    pub picard_tol: f64,
    pub picard_max: usize,
    pub theta: f64,
    pub flux_form: bool,
    pub tol_sum: f64,
    pub tol_neg: f64,
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            dt: None,
            t_end: default_t_end(),
            picard_tol: default_picard_tol(),
            picard_max: default_picard_max(),
            theta: default_theta(),
            flux_form: default_flux_form(),
            tol_sum: default_tol_sum(),
            tol_neg: default_tol_neg(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeSpec {
    /// Lattice sites; defaults to the grid's x cell count.
    pub sites: Option<usize>,
    /// Ensemble members.
    pub runs: usize,
    /// Sweep step; defaults to `0.5 h^2 / K+`.
    pub dt: Option<f64>,
    pub seed: u64,
    /// Step of the matched reference solve.
    pub pde_dt: Option<f64>,
}

impl Default for LatticeSpec {
    fn default() -> Self {
        Self {
            sites: None,
            runs: 100,
            dt: None,
            seed: 1,
            pde_dt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    /// Snapshot times; 0 and t_end are always added.
    pub times: Vec<f64>,
    pub dir: PathBuf,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            times: Vec::new(),
            dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilitySpec {
    /// Amplitude of the initial perturbation.
    pub amplitude: f64,
    /// Species receiving the perturbation (1..=n).
    pub species: usize,
    /// Species compensating it so sums stay one (1..=n, distinct).
    pub compensate: usize,
    /// Cosine mode of the perturbation shape.
    pub mode: usize,
}

impl Default for StabilitySpec {
    fn default() -> Self {
        Self {
            amplitude: 1e-3,
            species: 1,
            compensate: 2,
            mode: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceSpec {
    /// Mesh sequence for the spatial study; each entry doubles the previous.
    pub cells: Vec<usize>,
    /// Step sequence for the temporal study; each entry halves the previous.
    pub dts: Vec<f64>,
    /// Horizon of the study runs.
    pub t_end: f64,
    /// Diffusion rate; defaults to the configured K.
    pub rate: Option<f64>,
    /// Cosine mode of the test solution.
    pub mode: usize,
}

impl Default for ConvergenceSpec {
    fn default() -> Self {
        Self {
            cells: vec![50, 100, 200, 400],
            dts: vec![1e-2, 5e-3, 2.5e-3, 1.25e-3],
            t_end: 0.1,
            rate: None,
            mode: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub coefficients: CoefficientsSpec,
    pub grid: GridSpec,
    pub initial: InitialSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub lattice: LatticeSpec,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub stability: StabilitySpec,
    #[serde(default)]
    pub convergence: ConvergenceSpec,
}

/// Parses and validates a config file. Relative `from-file` paths are
/// resolved against the config's directory before validation so the echoed
/// config is self-contained.
pub fn parse_config(path: &Path) -> Result<SimulationConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut config: SimulationConfig =
        toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    if let InitialSpec::FromFile { path: file } = &mut config.initial {
        if file.is_relative() {
            if let Some(dir) = path.parent() {
                *file = dir.join(&*file);
            }
        }
        if !file.exists() {
            return Err(invalid(format!(
                "initial profile file {} does not exist",
                file.display()
            )));
        }
    }
    config.materialize_defaults()?;
    config.validate()?;
    Ok(config)
}

impl SimulationConfig {
    /// Fills grid- and rate-dependent defaults so the struct echoed into
    /// metadata is complete.
    pub fn materialize_defaults(&mut self) -> Result<(), ConfigError> {
        let dim = self.grid.cells.len();
        if !(1..=2).contains(&dim) {
            return Err(invalid(format!(
                "grid.cells must list 1 or 2 axes, got {dim}"
            )));
        }
        if !(self.grid.length.is_finite() && self.grid.length > 0.0) {
            return Err(invalid(format!("grid.length = {}", self.grid.length)));
        }
        let c = self.coefficient_set()?;
        let grid = self.grid()?;
        if self.solver.dt.is_none() {
            let h = grid.h();
            self.solver.dt = Some(if self.solver.theta == 1.0 {
                h
            } else {
                0.5 * h * h / c.k_plus()
            });
        }
        if self.lattice.sites.is_none() {
            self.lattice.sites = Some(self.grid.cells[0]);
        }
        let lattice_grid = self.lattice_grid()?;
        if self.lattice.dt.is_none() {
            let h = lattice_grid.h();
            self.lattice.dt = Some(0.5 * h * h / c.k_plus());
        }
        if self.lattice.pde_dt.is_none() {
            self.lattice.pde_dt = Some(
                lattice_grid
                    .h()
                    .min(self.solver.t_end / 200.0)
                    .max(f64::MIN_POSITIVE),
            );
        }
        Ok(())
    }

    /// Structural validation beyond what materialization catches.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let dim = self.grid.cells.len();
        if !(1..=2).contains(&dim) {
            return Err(invalid(format!(
                "grid.cells must list 1 or 2 axes, got {dim}"
            )));
        }
        if !(self.grid.length.is_finite() && self.grid.length > 0.0) {
            return Err(invalid(format!("grid.length = {}", self.grid.length)));
        }
        for &t in &self.output.times {
            if !(0.0..=self.solver.t_end).contains(&t) {
                return Err(invalid(format!(
                    "output time {t} outside [0, {}]",
                    self.solver.t_end
                )));
            }
        }
        let grid = self.grid()?;
        let c = self.coefficient_set()?;
        self.solver_config(&grid, &c)
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        let n = self.coefficients.n;
        let s = &self.stability;
        if !(1..=n).contains(&s.species) || !(1..=n).contains(&s.compensate) {
            return Err(invalid(format!(
                "stability perturbation species must lie in 1..={n}"
            )));
        }
        if s.species == s.compensate {
            return Err(invalid(
                "stability species and compensate must differ to preserve the sum",
            ));
        }
        Ok(())
    }

    pub fn coefficient_set(&self) -> Result<CoefficientSet, ConfigError> {
        let k = matrix_from_pairs(self.coefficients.n, &self.coefficients.pairs)
            .map_err(|e| invalid(e.to_string()))?;
        CoefficientSet::new(self.coefficients.n, k).map_err(|e| invalid(e.to_string()))
    }

    pub fn grid(&self) -> Result<Grid, ConfigError> {
        let h = self.grid.length / self.grid.cells[0] as f64;
        match self.grid.cells.len() {
            1 => Grid::line(self.grid.cells[0], h),
            _ => Grid::plane(self.grid.cells[0], self.grid.cells[1], h),
        }
        .map_err(|e| invalid(e.to_string()))
    }

    /// Separate line grid for lattice runs when `lattice.sites` overrides
    /// the cell count; shares the domain length.
    pub fn lattice_grid(&self) -> Result<Grid, ConfigError> {
        let sites = self.lattice.sites.unwrap_or(self.grid.cells[0]);
        Grid::line(sites, self.grid.length / sites as f64).map_err(|e| invalid(e.to_string()))
    }

    pub fn tolerances(&self) -> ConstraintTolerances {
        ConstraintTolerances {
            sum: self.solver.tol_sum,
            neg: self.solver.tol_neg,
        }
    }

    pub fn solver_config(&self, grid: &Grid, c: &CoefficientSet) -> SolverConfig {
        let h = grid.h();
        let dt = self.solver.dt.unwrap_or(if self.solver.theta == 1.0 {
            h
        } else {
            0.5 * h * h / c.k_plus()
        });
        SolverConfig {
            dt,
            t_end: self.solver.t_end,
            picard_tol: self.solver.picard_tol,
            picard_max: self.solver.picard_max,
            theta: self.solver.theta,
            flux_form: self.solver.flux_form,
            tolerances: self.tolerances(),
        }
    }

    /// Materializes the initial condition on a grid.
    pub fn initial_state(&self, grid: &Grid) -> Result<StateField, ConfigError> {
        let n = self.coefficients.n;
        let cells = grid.n_cells();
        let length = self.grid.length;
        let mut reduced: Vec<Vec<f64>> = vec![vec![0.0; cells]; n];
        match &self.initial {
            InitialSpec::Uniform { fractions } => {
                if fractions.len() != n {
                    return Err(invalid(format!(
                        "uniform profile lists {} fractions for {n} species",
                        fractions.len()
                    )));
                }
                for (s, &f) in fractions.iter().enumerate() {
                    reduced[s].fill(f);
                }
            }
            InitialSpec::SmoothedStep {
                left,
                right,
                center,
                width,
            } => {
                if left.len() != n || right.len() != n {
                    return Err(invalid(format!(
                        "smoothed-step profile needs {n} left and right fractions"
                    )));
                }
                if !(width.is_finite() && *width > 0.0) {
                    return Err(invalid(format!("smoothed-step width = {width}")));
                }
                let x0 = center.unwrap_or(length / 2.0);
                for iy in 0..grid.ny() {
                    for ix in 0..grid.nx() {
                        let x = grid.x_center(ix);
                        let ramp = 0.5 * (1.0 + ((x - x0) / width).tanh());
                        let cell = grid.index(ix, iy);
                        for s in 0..n {
                            reduced[s][cell] = left[s] + (right[s] - left[s]) * ramp;
                        }
                    }
                }
            }
            InitialSpec::CosineMixture {
                base,
                amplitudes,
                modes,
            } => {
                if base.len() != n || amplitudes.len() != n || modes.len() != n {
                    return Err(invalid(format!(
                        "cosine-mixture profile needs {n} base, amplitude, and mode entries"
                    )));
                }
                for iy in 0..grid.ny() {
                    for ix in 0..grid.nx() {
                        let x = grid.x_center(ix);
                        let cell = grid.index(ix, iy);
                        for s in 0..n {
                            let omega = modes[s] as f64 * std::f64::consts::PI / length;
                            reduced[s][cell] = base[s] + amplitudes[s] * (omega * x).cos();
                        }
                    }
                }
            }
            InitialSpec::FromFile { path } => {
                return read_snapshot_csv(path, grid, n + 1, self.tolerances());
            }
        }
        let mut fields = Vec::with_capacity(n + 1);
        let solvent: Vec<f64> = (0..cells)
            .map(|cell| 1.0 - reduced.iter().map(|f| f[cell]).sum::<f64>())
            .collect();
        fields.push(solvent);
        fields.extend(reduced);
        StateField::new(*grid, fields, 0.0, self.tolerances()).map_err(|e| invalid(e.to_string()))
    }

    /// Ensemble options with defaults resolved against grid and rates.
    pub fn ensemble_options(
        &self,
        grid: &Grid,
        c: &CoefficientSet,
        seed_override: Option<u64>,
    ) -> EnsembleOptions {
        let h = grid.h();
        EnsembleOptions {
            runs: self.lattice.runs,
            dt: self.lattice.dt.unwrap_or(0.5 * h * h / c.k_plus()),
            t_end: self.solver.t_end,
            seed: seed_override.unwrap_or(self.lattice.seed),
            output_times: self.output.times.clone(),
            pde_dt: self.lattice.pde_dt,
        }
    }
}

/// Reads a snapshot CSV (`x[,y],u_0..u_n`) back into a state.
pub fn read_snapshot_csv(
    path: &Path,
    grid: &Grid,
    species: usize,
    tol: ConstraintTolerances,
) -> Result<StateField, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| invalid(format!("{}: empty snapshot", path.display())))?;
    let coord_cols = grid.dim();
    let expected_cols = coord_cols + species;
    if header.split(',').count() != expected_cols {
        return Err(invalid(format!(
            "{}: header has {} columns, expected {}",
            path.display(),
            header.split(',').count(),
            expected_cols
        )));
    }
    let mut fields = vec![Vec::with_capacity(grid.n_cells()); species];
    for (row, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != expected_cols {
            return Err(invalid(format!(
                "{}: row {} has {} columns, expected {}",
                path.display(),
                row + 2,
                cols.len(),
                expected_cols
            )));
        }
        for (s, field) in fields.iter_mut().enumerate() {
            let value: f64 = cols[coord_cols + s].parse().map_err(|_| {
                invalid(format!(
                    "{}: row {} column {} is not a number",
                    path.display(),
                    row + 2,
                    coord_cols + s + 1
                ))
            })?;
            field.push(value);
        }
    }
    StateField::new(*grid, fields, 0.0, tol)
        .map_err(|e: FieldError| invalid(format!("{}: {e}", path.display())))
}
