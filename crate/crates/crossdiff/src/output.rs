//! Deterministic run artifacts: CSV tables and a JSON metadata record.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a given
//! binary produces byte-identical files for identical `(config, seed)`.
//! Fields are plain numbers and never need RFC-4180 quoting.

use crate::analysis::{AprioriReport, ConvergenceTable, StabilityReport};
use crate::coefficients::CoefficientSet;
use crate::config::SimulationConfig;
use crate::fields::StateField;
use crate::lattice::EnsembleResult;
use crate::solver::DiagnosticSeries;
use serde::Serialize;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

/// Derived constants block echoed into metadata and printed by
/// `check-coefficients`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoefficientSummary {
    pub n: usize,
    pub k_plus: f64,
    pub k_minus: f64,
    pub k_mean: f64,
    pub kappa: f64,
    pub alpha: f64,
    pub margin: f64,
    pub contraction_factor: f64,
    pub spread_holds: bool,
}

impl CoefficientSummary {
    pub fn from_set(c: &CoefficientSet) -> Self {
        Self {
            n: c.n(),
            k_plus: c.k_plus(),
            k_minus: c.k_minus(),
            k_mean: c.k_mean(),
            kappa: c.kappa(),
            alpha: c.alpha(),
            margin: c.margin(),
            contraction_factor: c.contraction_factor(),
            spread_holds: c.spread_condition().holds,
        }
    }
}

/// Top-level metadata record written once per run.
#[derive(Debug, Serialize)]
pub struct RunMetadata<'a> {
    pub command: &'static str,
    pub seed: u64,
    pub coefficients: CoefficientSummary,
    /// Materialized config echo; re-parsing it reproduces the run.
    pub config: &'a SimulationConfig,
    /// Command-specific results and verdicts.
    pub details: serde_json::Value,
}

pub fn write_metadata(path: &Path, metadata: &RunMetadata) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(metadata)?;
    text.push('\n');
    fs::write(path, text)
}

/// Snapshot schema: `x[,y],u_0,...,u_n`, one row per cell, row-major.
pub fn write_snapshot_csv(path: &Path, state: &StateField) -> io::Result<()> {
    let grid = state.grid();
    let species = state.species_count();
    let mut text = String::new();
    if grid.dim() == 1 {
        text.push('x');
    } else {
        text.push_str("x,y");
    }
    for i in 0..species {
        let _ = write!(text, ",u_{i}");
    }
    text.push('\n');
    for iy in 0..grid.ny() {
        for ix in 0..grid.nx() {
            let cell = grid.index(ix, iy);
            let _ = write!(text, "{}", grid.x_center(ix));
            if grid.dim() == 2 {
                let _ = write!(text, ",{}", grid.y_center(iy));
            }
            for i in 0..species {
                let _ = write!(text, ",{}", state.species(i)[cell]);
            }
            text.push('\n');
        }
    }
    fs::write(path, text)
}

pub fn write_diagnostics_csv(path: &Path, series: &DiagnosticSeries) -> io::Result<()> {
    let mut text = String::new();
    let species = series.rows.first().map_or(0, |r| r.masses.len());
    text.push_str("time");
    for i in 0..species {
        let _ = write!(text, ",mass_{i}");
    }
    text.push_str(
        ",entropy,entropy_increment,max_sum_deviation,min_value,grad_sq_sum,lap_sq_sum,dt_u_sq,grad_sup_sq,sweeps,max_ratio\n",
    );
    for row in &series.rows {
        let _ = write!(text, "{}", row.time);
        for m in &row.masses {
            let _ = write!(text, ",{m}");
        }
        let _ = writeln!(
            text,
            ",{},{},{},{},{},{},{},{},{},{}",
            row.entropy,
            row.entropy_increment,
            row.max_sum_deviation,
            row.min_value,
            row.grad_sq_sum,
            row.lap_sq_sum,
            row.dt_u_sq,
            row.grad_sup_sq,
            row.sweeps,
            row.max_ratio,
        );
    }
    fs::write(path, text)
}

/// Ensemble fields in the snapshot schema (one file per time index for mean
/// and standard error) plus the discrepancy table.
pub fn write_ensemble_csv(dir: &Path, result: &EnsembleResult) -> io::Result<()> {
    let grid = &result.grid;
    let species = result.mean.first().map_or(0, Vec::len);
    for (ti, time) in result.times.iter().enumerate() {
        for (kind, data) in [("mean", &result.mean), ("stderr", &result.stderr)] {
            let mut text = String::from("x");
            for i in 0..species {
                let _ = write!(text, ",u_{i}");
            }
            text.push('\n');
            for site in 0..grid.nx() {
                let _ = write!(text, "{}", grid.x_center(site));
                for field in &data[ti] {
                    let _ = write!(text, ",{}", field[site]);
                }
                text.push('\n');
            }
            fs::write(dir.join(format!("lattice_{kind}_{ti:03}.csv")), text)?;
        }
        let _ = time;
    }
    let mut text = String::from("time,l2_abs,l2_rel,max_abs\n");
    for row in &result.discrepancy {
        let _ = writeln!(
            text,
            "{},{},{},{}",
            row.time, row.l2_abs, row.l2_rel, row.max_abs
        );
    }
    fs::write(dir.join("discrepancy.csv"), text)
}

pub fn write_stability_csv(path: &Path, report: &StabilityReport) -> io::Result<()> {
    let mut text = String::from("time,distance_sq,integrand,exponent,bound,margin\n");
    for row in &report.rows {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{}",
            row.time, row.distance_sq, row.integrand, row.exponent, row.bound, row.margin,
        );
    }
    fs::write(path, text)
}

pub fn write_convergence_csv(path: &Path, table: &ConvergenceTable) -> io::Result<()> {
    let mut text = String::from("h,error,observed_order\n");
    for (index, row) in table.rows.iter().enumerate() {
        if index == 0 {
            let _ = writeln!(text, "{},{},", row.h, row.error);
        } else {
            let _ = writeln!(text, "{},{},{}", row.h, row.error, table.orders[index - 1]);
        }
    }
    fs::write(path, text)
}

pub fn apriori_json(report: &AprioriReport) -> serde_json::Value {
    serde_json::to_value(report).unwrap_or(serde_json::Value::Null)
}
