//! Post-hoc verification harnesses over finished trajectories.
//!
//! Nothing here advances a solution; these checks consume snapshots and
//! per-run accumulators and certify the structural bounds the scheme is
//! supposed to inherit: the weak-strong stability estimate, the linear
//! a-priori energy bounds, and mesh-refinement orders.

use crate::coefficients::CoefficientSet;
use crate::fields::l2_norm_sq;
use crate::solver::{vector_gradient_sup_sq, RunResult, Trajectory};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("trajectories live on different grids")]
    GridMismatch,
    #[error("trajectories sample different times ({left} vs {right} at index {index})")]
    TimeMismatch { index: usize, left: f64, right: f64 },
    #[error("spread condition violated (margin {margin}); the bound constant is undefined")]
    AssumptionViolated { margin: f64 },
    #[error("need at least {needed} meshes, each half the spacing of the previous; got {got}")]
    InsufficientMeshes { needed: usize, got: usize },
    #[error("mesh spacings must halve: h[{index}] = {coarse} then {fine}")]
    NotRefining {
        index: usize,
        coarse: f64,
        fine: f64,
    },
}

/// Absolute slack allowed when comparing squared distances to the bound.
const STABILITY_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityVerdict {
    Holds,
    /// The distance exceeded the bound by more than the slack somewhere.
    /// The constant in the estimate is existential, so this is logged as
    /// inconclusive rather than as a refutation.
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityRow {
    pub time: f64,
    /// Squared L2 distance between the trajectories, summed over species.
    pub distance_sq: f64,
    /// Squared sup-norm of the designated strong solution's gradient vector.
    pub integrand: f64,
    /// Accumulated `C' * integral of the integrand` up to this time.
    pub exponent: f64,
    /// `exp(exponent) * distance_sq(0)`.
    pub bound: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub c_prime: f64,
    pub rows: Vec<StabilityRow>,
    pub worst_margin: f64,
    pub verdict: StabilityVerdict,
}

/// Checks the Gronwall-type stability bound between two trajectories on the
/// same grid and schedule. `run_a` is the designated strong solution: its
/// gradient sup-norms feed the exponent. The constant is
/// `C' = n kappa / (K - 2 n kappa)`, the proof's constant at
/// `epsilon = (K - 2 n kappa) / 2`; time integration is trapezoidal over
/// the snapshot times.
pub fn stability_check(
    run_a: &Trajectory,
    run_b: &Trajectory,
    c: &CoefficientSet,
) -> Result<StabilityReport, AnalysisError> {
    let margin = c.margin();
    if margin <= 0.0 {
        return Err(AnalysisError::AssumptionViolated { margin });
    }
    if run_a.states.len() != run_b.states.len() || run_a.states.is_empty() {
        return Err(AnalysisError::TimeMismatch {
            index: run_a.states.len().min(run_b.states.len()),
            left: f64::NAN,
            right: f64::NAN,
        });
    }
    let grid = run_a.states[0].grid();
    for (index, (a, b)) in run_a.states.iter().zip(&run_b.states).enumerate() {
        if a.grid() != grid || b.grid() != grid || a.species_count() != b.species_count() {
            return Err(AnalysisError::GridMismatch);
        }
        if (a.time() - b.time()).abs() > 1e-9 * a.time().abs().max(1.0) {
            return Err(AnalysisError::TimeMismatch {
                index,
                left: a.time(),
                right: b.time(),
            });
        }
    }

    let n = c.n() as f64;
    let c_prime = n * c.kappa() / margin;

    let mut rows: Vec<StabilityRow> = Vec::with_capacity(run_a.states.len());
    let mut exponent = 0.0;
    let mut initial_distance = 0.0;
    let mut worst_margin = f64::INFINITY;
    let mut holds = true;
    let mut prev: Option<(f64, f64)> = None;
    for (a, b) in run_a.states.iter().zip(&run_b.states) {
        let mut distance_sq = 0.0;
        for i in 0..a.species_count() {
            let diff: Vec<f64> = a
                .species(i)
                .iter()
                .zip(b.species(i))
                .map(|(x, y)| x - y)
                .collect();
            distance_sq += l2_norm_sq(&diff, grid);
        }
        let integrand = vector_gradient_sup_sq(a);
        if let Some((t_prev, g_prev)) = prev {
            exponent += c_prime * 0.5 * (g_prev + integrand) * (a.time() - t_prev);
        } else {
            initial_distance = distance_sq;
        }
        prev = Some((a.time(), integrand));
        let bound = exponent.exp() * initial_distance;
        let margin_here = bound - distance_sq;
        worst_margin = worst_margin.min(margin_here);
        if distance_sq > bound + STABILITY_SLACK {
            holds = false;
        }
        rows.push(StabilityRow {
            time: a.time(),
            distance_sq,
            integrand,
            exponent,
            bound,
            margin: margin_here,
        });
    }

    Ok(StabilityReport {
        c_prime,
        rows,
        worst_margin,
        verdict: if holds {
            StabilityVerdict::Holds
        } else {
            StabilityVerdict::Inconclusive
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AprioriRow {
    /// Left-hand side of the inequality, accumulated discretely.
    pub lhs: f64,
    /// The constant it is tested against.
    pub constant: f64,
    /// `lhs / constant`, zero when both sides vanish.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AprioriReport {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    /// Gradient sup plus Laplacian time integral against `c0`.
    pub energy: AprioriRow,
    /// Sup of the summed L2 norms against `c1`.
    pub mass: AprioriRow,
    /// Time-derivative integral against `c2`.
    pub time_derivative: AprioriRow,
    pub slack: f64,
    pub holds: bool,
}

/// Allowed overshoot of the continuous constants by the discrete sums.
const APRIORI_SLACK: f64 = 0.10;

fn ratio(lhs: f64, constant: f64) -> f64 {
    if constant == 0.0 {
        if lhs.abs() <= f64::EPSILON {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        lhs / constant
    }
}

/// Checks the three a-priori energy bounds of the linearized problem on a
/// finished run, with constants built from the initial data:
///
/// ```text
/// C0 = 2 max(1, 1/(K - 2 n kappa)) sum_i ||grad u_i(0)||^2
/// C1 = exp(2 n kappa T) (sum_i ||u_i(0)||^2 + 2 n kappa C0)
/// C2 = (K + 2 n kappa) C0
/// ```
pub fn apriori_check(run: &RunResult, c: &CoefficientSet) -> Result<AprioriReport, AnalysisError> {
    let margin = c.margin();
    if margin <= 0.0 {
        return Err(AnalysisError::AssumptionViolated { margin });
    }
    let acc = &run.apriori;
    let start = run
        .trajectory
        .states
        .first()
        .map(|s| s.time())
        .unwrap_or(0.0);
    let horizon = acc.t_end - start;
    let two_n_kappa = 2.0 * c.n() as f64 * c.kappa();

    let grad0: f64 = acc.initial_grad_sq.iter().sum();
    let l20: f64 = acc.initial_l2_sq.iter().sum();
    let c0 = 2.0 * 1.0f64.max(1.0 / margin) * grad0;
    let c1 = (two_n_kappa * horizon).exp() * (l20 + two_n_kappa * c0);
    let c2 = (c.k_mean() + two_n_kappa) * c0;

    let lhs_energy: f64 = acc.sup_grad_sq.iter().sum::<f64>() + acc.lap_sq_integral;
    let lhs_mass = acc.sup_sum_l2_sq;
    let lhs_dt = acc.dt_u_sq_integral;

    let energy = AprioriRow {
        lhs: lhs_energy,
        constant: c0,
        ratio: ratio(lhs_energy, c0),
    };
    let mass = AprioriRow {
        lhs: lhs_mass,
        constant: c1,
        ratio: ratio(lhs_mass, c1),
    };
    let time_derivative = AprioriRow {
        lhs: lhs_dt,
        constant: c2,
        ratio: ratio(lhs_dt, c2),
    };
    let limit = 1.0 + APRIORI_SLACK;
    let holds = energy.ratio <= limit && mass.ratio <= limit && time_derivative.ratio <= limit;
    Ok(AprioriReport {
        c0,
        c1,
        c2,
        energy,
        mass,
        time_derivative,
        slack: APRIORI_SLACK,
        holds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub h: f64,
    pub error: f64,
}

/// Mesh-refinement table: rows sorted by h descending, observed orders from
/// consecutive log2 error ratios.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    pub orders: Vec<f64>,
}

impl ConvergenceTable {
    /// Observed order on the finest pair.
    pub fn finest_order(&self) -> f64 {
        self.orders.last().copied().unwrap_or(f64::NAN)
    }
}

/// Builds a convergence table from `(h, error)` pairs. Requires at least
/// three meshes, each half the spacing of the previous.
pub fn convergence_study(rows: &[(f64, f64)]) -> Result<ConvergenceTable, AnalysisError> {
    if rows.len() < 3 {
        return Err(AnalysisError::InsufficientMeshes {
            needed: 3,
            got: rows.len(),
        });
    }
    let mut sorted: Vec<(f64, f64)> = rows.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (index, pair) in sorted.windows(2).enumerate() {
        let (coarse, fine) = (pair[0].0, pair[1].0);
        if (coarse / fine - 2.0).abs() > 1e-9 {
            return Err(AnalysisError::NotRefining {
                index,
                coarse,
                fine,
            });
        }
    }
    let orders = sorted
        .windows(2)
        .map(|pair| (pair[0].1 / pair[1].1).log2())
        .collect();
    Ok(ConvergenceTable {
        rows: sorted
            .into_iter()
            .map(|(h, error)| ConvergenceRow { h, error })
            .collect(),
        orders,
    })
}
