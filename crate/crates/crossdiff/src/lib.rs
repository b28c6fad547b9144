//! Numerical lab for a volume-filling cross-diffusion system.
//!
//! The continuum model evolves `n + 1` species densities under pairwise
//! exchange rates `K_ij` with no-flux boundaries; densities stay in the unit
//! simplex cellwise. The crate provides:
//!
//! - [`coefficients`]: the rate matrix, its derived constants, and the
//!   coercivity/contraction certificates built on the rate spread;
//! - [`fields`]: grids, states, entropy, and discrete Neumann operators;
//! - [`solver`]: semi-implicit time stepping via a clamped, linearized
//!   fixed-point sweep, in strong and conservative flux forms;
//! - [`lattice`]: the microscopic exclusion process with species swaps and
//!   seedable ensemble runs against the macroscopic solver;
//! - [`analysis`]: weak-strong stability bounds, a-priori estimate checks,
//!   and convergence studies;
//! - [`config`], [`output`], [`cli`]: run configuration, deterministic CSV
//!   and JSON artifacts, and the command-line front end.

// Stencil and matrix kernels read better with explicit indices.
#![allow(clippy::needless_range_loop)]

pub mod analysis;
pub mod cli;
pub mod coefficients;
pub mod config;
pub mod fields;
pub mod lattice;
pub mod output;
pub mod solver;
