//! Density fields on uniform grids with no-flux boundaries.
//!
//! Cell-centered storage, ghost cells mirroring the first interior value for
//! homogeneous Neumann conditions. The mirror keeps the discrete Laplacian
//! symmetric and its cell sum zero, which the conservation tests rely on.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default constraint tolerances: roughly what round-off accumulates to over
/// O(1e4) implicit steps.
pub const DEFAULT_TOL_SUM: f64 = 1e-10;
pub const DEFAULT_TOL_NEG: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("grid spacing must be positive and finite, got {0}")]
    InvalidSpacing(f64),
    #[error("grids need at least 3 cells per axis for second-order stencils, got {0}")]
    TooFewCells(usize),
    #[error("array has {got} entries but the grid has {expected} cells")]
    ShapeMismatch { got: usize, expected: usize },
    #[error("simplex constraint violated: {detail}")]
    SimplexViolation { detail: String },
    #[error("entropy variables need a strictly interior point (coordinate {index} = {value})")]
    BoundaryPoint { index: usize, value: f64 },
    #[error("a state needs at least two species (solvent plus one)")]
    TooFewSpecies,
    #[error("fields live on different grids")]
    GridMismatch,
}

/// Per-cell constraint tolerances for the volume-filling state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintTolerances {
    pub sum: f64,
    pub neg: f64,
}

impl Default for ConstraintTolerances {
    fn default() -> Self {
        Self {
            sum: DEFAULT_TOL_SUM,
            neg: DEFAULT_TOL_NEG,
        }
    }
}

/// Uniform cell-centered grid in one or two dimensions, spacing `h` on every
/// axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dim: u8,
    nx: usize,
    ny: usize,
    h: f64,
}

impl Grid {
    pub fn line(nx: usize, h: f64) -> Result<Self, FieldError> {
        if !(h.is_finite() && h > 0.0) {
            return Err(FieldError::InvalidSpacing(h));
        }
        if nx < 3 {
            return Err(FieldError::TooFewCells(nx));
        }
        Ok(Self {
            dim: 1,
            nx,
            ny: 1,
            h,
        })
    }

    pub fn plane(nx: usize, ny: usize, h: f64) -> Result<Self, FieldError> {
        if !(h.is_finite() && h > 0.0) {
            return Err(FieldError::InvalidSpacing(h));
        }
        if nx < 3 {
            return Err(FieldError::TooFewCells(nx));
        }
        if ny < 3 {
            return Err(FieldError::TooFewCells(ny));
        }
        Ok(Self { dim: 2, nx, ny, h })
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    /// Measure of one cell, `h^d`.
    pub fn cell_volume(&self) -> f64 {
        if self.dim == 1 {
            self.h
        } else {
            self.h * self.h
        }
    }

    pub fn length_x(&self) -> f64 {
        self.nx as f64 * self.h
    }

    pub fn length_y(&self) -> f64 {
        self.ny as f64 * self.h
    }

    /// Coordinate of the cell center along x.
    pub fn x_center(&self, ix: usize) -> f64 {
        (ix as f64 + 0.5) * self.h
    }

    pub fn y_center(&self, iy: usize) -> f64 {
        (iy as f64 + 0.5) * self.h
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    fn check_shape(&self, f: &[f64]) -> Result<(), FieldError> {
        if f.len() != self.n_cells() {
            return Err(FieldError::ShapeMismatch {
                got: f.len(),
                expected: self.n_cells(),
            });
        }
        Ok(())
    }
}

/// Truncation to the unit interval, `max(0, min(1, x))`.
#[allow(clippy::manual_clamp)]
pub fn clamp_unit(x: f64) -> f64 {
    x.min(1.0).max(0.0)
}

/// Second-order centered Laplacian with mirrored ghost cells (homogeneous
/// Neumann). Assembled as a difference of face fluxes with zero flux on the
/// boundary, so the cell sum telescopes to zero up to round-off.
pub fn laplacian_neumann(f: &[f64], grid: &Grid) -> Result<Vec<f64>, FieldError> {
    grid.check_shape(f)?;
    let (nx, ny, h) = (grid.nx, grid.ny, grid.h);
    let inv_h = 1.0 / h;
    let mut out = vec![0.0; f.len()];
    for iy in 0..ny {
        let row = iy * nx;
        let mut left_flux = 0.0;
        for ix in 0..nx {
            let right_flux = if ix + 1 < nx {
                (f[row + ix + 1] - f[row + ix]) * inv_h
            } else {
                0.0
            };
            out[row + ix] += (right_flux - left_flux) * inv_h;
            left_flux = right_flux;
        }
    }
    if grid.dim == 2 {
        for ix in 0..nx {
            let mut down_flux = 0.0;
            for iy in 0..ny {
                let up_flux = if iy + 1 < ny {
                    (f[(iy + 1) * nx + ix] - f[iy * nx + ix]) * inv_h
                } else {
                    0.0
                };
                out[iy * nx + ix] += (up_flux - down_flux) * inv_h;
                down_flux = up_flux;
            }
        }
    }
    Ok(out)
}

/// Max over interior faces of |one-sided difference| / h. Boundary faces
/// carry zero gradient under the mirror convention.
pub fn gradient_sup_norm(f: &[f64], grid: &Grid) -> Result<f64, FieldError> {
    grid.check_shape(f)?;
    let (nx, ny, h) = (grid.nx, grid.ny, grid.h);
    let mut sup: f64 = 0.0;
    for iy in 0..ny {
        for ix in 0..nx - 1 {
            sup = sup.max(((f[iy * nx + ix + 1] - f[iy * nx + ix]) / h).abs());
        }
    }
    if grid.dim == 2 {
        for iy in 0..ny - 1 {
            for ix in 0..nx {
                sup = sup.max(((f[(iy + 1) * nx + ix] - f[iy * nx + ix]) / h).abs());
            }
        }
    }
    Ok(sup)
}

/// Discrete H1 seminorm squared: face-gradient squares times cell volume.
/// Matches summation by parts against `laplacian_neumann` exactly.
pub fn gradient_sq_l2(f: &[f64], grid: &Grid) -> Result<f64, FieldError> {
    grid.check_shape(f)?;
    let (nx, ny, h) = (grid.nx, grid.ny, grid.h);
    let vol = grid.cell_volume();
    let mut total = 0.0;
    for iy in 0..ny {
        for ix in 0..nx - 1 {
            let g = (f[iy * nx + ix + 1] - f[iy * nx + ix]) / h;
            total += g * g * vol;
        }
    }
    if grid.dim == 2 {
        for iy in 0..ny - 1 {
            for ix in 0..nx {
                let g = (f[(iy + 1) * nx + ix] - f[iy * nx + ix]) / h;
                total += g * g * vol;
            }
        }
    }
    Ok(total)
}

/// Cell-weighted L2 norm squared.
pub fn l2_norm_sq(f: &[f64], grid: &Grid) -> f64 {
    let vol = grid.cell_volume();
    f.iter().map(|v| v * v * vol).sum()
}

pub fn l2_norm(f: &[f64], grid: &Grid) -> f64 {
    l2_norm_sq(f, grid).sqrt()
}

/// Discrete integral of a cell field.
pub fn mass(f: &[f64], grid: &Grid) -> f64 {
    let vol = grid.cell_volume();
    f.iter().map(|v| v * vol).sum()
}

fn xlogx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// Mixing entropy density at a reduced simplex point `U = (u_1, ..., u_n)`:
/// `sum_i u_i log u_i + (1 - sum u_i) log(1 - sum u_i)`, with the convention
/// `0 log 0 = 0`. Bounded below by `-log(n + 1)`.
pub fn entropy_density(u_reduced: &[f64]) -> Result<f64, FieldError> {
    let tol = ConstraintTolerances::default();
    let mut sum = 0.0;
    for (index, &u) in u_reduced.iter().enumerate() {
        if u < -tol.neg {
            return Err(FieldError::SimplexViolation {
                detail: format!("u_{} = {u} is negative", index + 1),
            });
        }
        sum += u;
    }
    if sum > 1.0 + tol.sum {
        return Err(FieldError::SimplexViolation {
            detail: format!("reduced coordinates sum to {sum} > 1"),
        });
    }
    let mut h = xlogx(1.0 - sum);
    for &u in u_reduced {
        h += xlogx(u);
    }
    Ok(h)
}

/// Entropy variables `w_i = log(u_i / u_0)` at a strictly interior point.
/// Boundary points are refused rather than mapped to infinities.
pub fn entropy_variables(u_reduced: &[f64]) -> Result<Vec<f64>, FieldError> {
    let sum: f64 = u_reduced.iter().sum();
    let u0 = 1.0 - sum;
    if u0 <= 0.0 {
        return Err(FieldError::BoundaryPoint {
            index: 0,
            value: u0,
        });
    }
    let log_u0 = u0.ln();
    u_reduced
        .iter()
        .enumerate()
        .map(|(i, &u)| {
            if u <= 0.0 {
                Err(FieldError::BoundaryPoint {
                    index: i + 1,
                    value: u,
                })
            } else {
                Ok(u.ln() - log_u0)
            }
        })
        .collect()
}

/// Inverse of `entropy_variables`: the softmax-type map
/// `u_i = exp(w_i) / (1 + sum_j exp(w_j))`.
pub fn entropy_variables_inverse(w: &[f64]) -> Vec<f64> {
    // Shift by the max for overflow safety; the ratio is unchanged.
    let m = w.iter().cloned().fold(0.0f64, f64::max);
    let denom: f64 = (-m).exp() + w.iter().map(|wi| (wi - m).exp()).sum::<f64>();
    w.iter().map(|wi| (wi - m).exp() / denom).collect()
}

/// Densities of `n + 1` species on a grid at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct StateField {
    grid: Grid,
    time: f64,
    u: Vec<Vec<f64>>,
}

impl StateField {
    /// Validates the simplex constraint cellwise: non-negative within
    /// `tol.neg`, sums within `tol.sum` of one.
    pub fn new(
        grid: Grid,
        u: Vec<Vec<f64>>,
        time: f64,
        tol: ConstraintTolerances,
    ) -> Result<Self, FieldError> {
        if u.len() < 2 {
            return Err(FieldError::TooFewSpecies);
        }
        for f in &u {
            grid.check_shape(f)?;
        }
        for cell in 0..grid.n_cells() {
            let mut sum = 0.0;
            for (i, f) in u.iter().enumerate() {
                if f[cell] < -tol.neg {
                    return Err(FieldError::SimplexViolation {
                        detail: format!("u_{i} at cell {cell} is {}", f[cell]),
                    });
                }
                sum += f[cell];
            }
            if (sum - 1.0).abs() > tol.sum {
                return Err(FieldError::SimplexViolation {
                    detail: format!("species sum at cell {cell} is {sum}"),
                });
            }
        }
        Ok(Self { grid, time, u })
    }

    /// Builds a state without constraint validation. Solver internals use
    /// this for iterates whose drift is diagnosed separately.
    pub(crate) fn from_raw(grid: Grid, u: Vec<Vec<f64>>, time: f64) -> Self {
        Self { grid, time, u }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub(crate) fn set_time(&mut self, t: f64) {
        self.time = t;
    }

    /// Number of species including the solvent.
    pub fn species_count(&self) -> usize {
        self.u.len()
    }

    pub fn species(&self, i: usize) -> &[f64] {
        &self.u[i]
    }

    pub fn fields(&self) -> &[Vec<f64>] {
        &self.u
    }

    /// Total mass of species `i`.
    pub fn species_mass(&self, i: usize) -> f64 {
        mass(&self.u[i], &self.grid)
    }

    /// Largest cellwise deviation of the species sum from one.
    pub fn max_sum_deviation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for cell in 0..self.grid.n_cells() {
            let sum: f64 = self.u.iter().map(|f| f[cell]).sum();
            worst = worst.max((sum - 1.0).abs());
        }
        worst
    }

    /// Smallest density over all species and cells.
    pub fn min_value(&self) -> f64 {
        self.u
            .iter()
            .flat_map(|f| f.iter().cloned())
            .fold(f64::INFINITY, f64::min)
    }

    /// Reduced coordinates (species 1..) at one cell.
    pub fn reduced_at(&self, cell: usize) -> Vec<f64> {
        self.u[1..].iter().map(|f| f[cell]).collect()
    }
}

/// Entropy of a state: pointwise density values, their integral, and the
/// increment against a previous total when one is supplied.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyReport {
    pub pointwise: Vec<f64>,
    pub total: f64,
    pub increment: Option<f64>,
}

pub fn entropy_report(
    state: &StateField,
    previous_total: Option<f64>,
) -> Result<EntropyReport, FieldError> {
    let grid = state.grid();
    let vol = grid.cell_volume();
    let mut pointwise = Vec::with_capacity(grid.n_cells());
    let mut total = 0.0;
    for cell in 0..grid.n_cells() {
        // Clamp round-off noise; genuine violations were rejected upstream
        // and are tracked by the run diagnostics.
        let reduced: Vec<f64> = state.u[1..].iter().map(|f| clamp_unit(f[cell])).collect();
        let sum: f64 = reduced.iter().sum();
        let h = if sum >= 1.0 {
            reduced.iter().map(|&v| xlogx(v / sum)).sum()
        } else {
            let mut value = xlogx(1.0 - sum);
            for &v in &reduced {
                value += xlogx(v);
            }
            value
        };
        pointwise.push(h);
        total += h * vol;
    }
    Ok(EntropyReport {
        pointwise,
        total,
        increment: previous_total.map(|prev| total - prev),
    })
}
