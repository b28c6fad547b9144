//! Cross-diffusion rate matrix and the constants derived from it.
//!
//! The rate matrix `K = (K_ij)` couples `n + 1` species (species 0 is the
//! solvent/vacancy). The structural guarantees of the solver, coercivity of
//! the linearized operator and contraction of the fixed-point map, hinge on
//! the spread of the off-diagonal rates around their midpoint, so this module
//! owns those derived constants and the checks built on them.

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

/// Tolerance for simplex preconditions on points fed to `diffusion_matrix`.
const SIMPLEX_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoefficientError {
    #[error("rate matrix must be symmetric: k[{i}][{j}] = {left} but k[{j}][{i}] = {right}")]
    SymmetryViolation {
        i: usize,
        j: usize,
        left: f64,
        right: f64,
    },
    #[error("off-diagonal rate k[{i}][{j}] = {value} must be strictly positive")]
    NonPositiveRate { i: usize, j: usize, value: f64 },
    #[error("off-diagonal rate k[{i}][{j}] = {value} is not finite")]
    NonFiniteRate { i: usize, j: usize, value: f64 },
    #[error("need at least one species besides the solvent")]
    EmptySystem,
    #[error("rate matrix is {rows}x{cols}, expected {expected}x{expected}")]
    ShapeMismatch {
        rows: usize,
        cols: usize,
        expected: usize,
    },
    #[error("point outside the closed simplex: {detail}")]
    SimplexViolation { detail: String },
    #[error("pair ({i}, {j}) stated more than once; state each unordered pair exactly once")]
    DuplicatePair { i: usize, j: usize },
    #[error("no rate given for pair ({i}, {j})")]
    MissingRate { i: usize, j: usize },
    #[error("pair index ({i}, {j}) out of range for {species} species")]
    IndexOutOfRange { i: usize, j: usize, species: usize },
}

/// Verdict of the rate-spread condition `K > 2 n kappa`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpreadVerdict {
    pub holds: bool,
    pub margin: f64,
}

/// Symmetric rate matrix for `n + 1` species plus derived constants.
///
/// `k_plus`/`k_minus` are the extrema over all off-diagonal pairs, `k_mean`
/// their midpoint, `kappa` the half-spread. `margin = k_mean - 2 n kappa`
/// may be non-positive; construction still succeeds and the solver refuses
/// separately.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    n: usize,
    k: Vec<Vec<f64>>,
    k_plus: f64,
    k_minus: f64,
    k_mean: f64,
    kappa: f64,
    alpha: f64,
    margin: f64,
}

impl CoefficientSet {
    /// Validates an `(n+1) x (n+1)` rate matrix and computes the derived
    /// constants. The diagonal is ignored. Symmetry is checked with exact
    /// equality; asymmetric physics is never silently averaged away.
    pub fn new(n: usize, entries: Vec<Vec<f64>>) -> Result<Self, CoefficientError> {
        if n == 0 {
            return Err(CoefficientError::EmptySystem);
        }
        let m = n + 1;
        if entries.len() != m || entries.iter().any(|row| row.len() != m) {
            return Err(CoefficientError::ShapeMismatch {
                rows: entries.len(),
                cols: entries.first().map_or(0, Vec::len),
                expected: m,
            });
        }
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                let v = entries[i][j];
                if !v.is_finite() {
                    return Err(CoefficientError::NonFiniteRate { i, j, value: v });
                }
                if v <= 0.0 {
                    return Err(CoefficientError::NonPositiveRate { i, j, value: v });
                }
            }
        }
        for i in 0..m {
            for j in (i + 1)..m {
                if entries[i][j] != entries[j][i] {
                    return Err(CoefficientError::SymmetryViolation {
                        i,
                        j,
                        left: entries[i][j],
                        right: entries[j][i],
                    });
                }
            }
        }
        let mut k_plus = f64::NEG_INFINITY;
        let mut k_minus = f64::INFINITY;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    k_plus = k_plus.max(entries[i][j]);
                    k_minus = k_minus.min(entries[i][j]);
                }
            }
        }
        let k_mean = (k_plus + k_minus) / 2.0;
        let kappa = (k_plus - k_minus) / 2.0;
        let margin = k_mean - 2.0 * n as f64 * kappa;
        Ok(Self {
            n,
            k: entries,
            k_plus,
            k_minus,
            k_mean,
            kappa,
            alpha: k_minus,
            margin,
        })
    }

    /// Number of species excluding the solvent.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of species including the solvent, `n + 1`.
    pub fn species_count(&self) -> usize {
        self.n + 1
    }

    /// Rate between two distinct species indices.
    pub fn rate(&self, i: usize, j: usize) -> f64 {
        debug_assert_ne!(i, j, "diagonal rates are unused");
        self.k[i][j]
    }

    pub fn matrix(&self) -> &[Vec<f64>] {
        &self.k
    }

    pub fn k_plus(&self) -> f64 {
        self.k_plus
    }

    pub fn k_minus(&self) -> f64 {
        self.k_minus
    }

    /// Midpoint `K = (K+ + K-)/2` of the off-diagonal rates.
    pub fn k_mean(&self) -> f64 {
        self.k_mean
    }

    /// Half-spread `kappa = (K+ - K-)/2`; zero means pure heat equations.
    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    /// Checks the spread condition `K > 2 n kappa` (strictly).
    pub fn spread_condition(&self) -> SpreadVerdict {
        SpreadVerdict {
            holds: self.margin > 0.0,
            margin: self.margin,
        }
    }

    /// Fixed-point contraction factor `2 n kappa / K`; `< 1` exactly when
    /// the spread condition holds.
    pub fn contraction_factor(&self) -> f64 {
        2.0 * self.n as f64 * self.kappa / self.k_mean
    }

    /// Diffusion matrix `A(U)` of the reduced n-equation system at a point
    /// `U = (u_1, ..., u_n)` of the closed simplex:
    ///
    /// ```text
    /// A_ii = sum_{j != i} (K_ij - K_i0) u_j + K_i0
    /// A_ij = -(K_ij - K_i0) u_i,   j != i
    /// ```
    ///
    /// Species indices in the formulas are 1-based; the returned matrix is
    /// indexed 0-based over species 1..=n.
    pub fn diffusion_matrix(&self, u_reduced: &[f64]) -> Result<Vec<Vec<f64>>, CoefficientError> {
        if u_reduced.len() != self.n {
            return Err(CoefficientError::SimplexViolation {
                detail: format!(
                    "expected {} reduced coordinates, got {}",
                    self.n,
                    u_reduced.len()
                ),
            });
        }
        let mut sum = 0.0;
        for (idx, &u) in u_reduced.iter().enumerate() {
            if u < -SIMPLEX_TOL {
                return Err(CoefficientError::SimplexViolation {
                    detail: format!("u_{} = {u} is negative", idx + 1),
                });
            }
            sum += u;
        }
        if sum > 1.0 + SIMPLEX_TOL {
            return Err(CoefficientError::SimplexViolation {
                detail: format!("coordinates sum to {sum} > 1"),
            });
        }
        let n = self.n;
        let mut a = vec![vec![0.0; n]; n];
        for i in 1..=n {
            let ki0 = self.k[i][0];
            let mut diag = ki0;
            for j in 1..=n {
                if j == i {
                    continue;
                }
                diag += (self.k[i][j] - ki0) * u_reduced[j - 1];
                a[i - 1][j - 1] = -(self.k[i][j] - ki0) * u_reduced[i - 1];
            }
            a[i - 1][i - 1] = diag;
        }
        Ok(a)
    }

    /// Matrix `P - B(w)` of the linearized `(n+1)`-species system, with
    /// `P = K I` and `B` assembled from clamped densities `w`:
    ///
    /// ```text
    /// B_ii = sum_{j != i} (K_ij - K) w_j,   B_ij = -(K_ij - K) w_i
    /// ```
    ///
    /// Inputs are clamped to `[0, 1]`, mirroring the truncation the solver
    /// applies to lagged densities.
    pub fn linearized_matrix(&self, w: &[f64]) -> Vec<Vec<f64>> {
        assert_eq!(
            w.len(),
            self.species_count(),
            "one clamped value per species"
        );
        let m = self.species_count();
        let mut pb = vec![vec![0.0; m]; m];
        for i in 0..m {
            let mut diag = self.k_mean;
            for j in 0..m {
                if j == i {
                    continue;
                }
                let dev = self.k[i][j] - self.k_mean;
                diag -= dev * w[j].clamp(0.0, 1.0);
                pb[i][j] = dev * w[i].clamp(0.0, 1.0);
            }
            pb[i][i] = diag;
        }
        pb
    }

    /// Samples the coercivity bound of `sym(P - B)` over the clamp cube:
    /// all `2^(n+1)` vertices plus `interior_samples` uniform interior
    /// points. Returns the smallest eigenvalue seen; the structural bound
    /// is `K - 2 n kappa`.
    pub fn coercivity_certificate<R: Rng>(
        &self,
        interior_samples: usize,
        rng: &mut R,
    ) -> CoercivityCertificate {
        let m = self.species_count();
        let mut min_eig = f64::INFINITY;
        for mask in 0u64..(1u64 << m) {
            let w: Vec<f64> = (0..m).map(|i| ((mask >> i) & 1) as f64).collect();
            min_eig = min_eig.min(self.min_symmetric_eigenvalue(&w));
        }
        for _ in 0..interior_samples {
            let w: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            min_eig = min_eig.min(self.min_symmetric_eigenvalue(&w));
        }
        CoercivityCertificate {
            min_eigenvalue: min_eig,
            bound: self.margin,
            samples: interior_samples,
        }
    }

    fn min_symmetric_eigenvalue(&self, w: &[f64]) -> f64 {
        let pb = self.linearized_matrix(w);
        let m = pb.len();
        let mut sym = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in 0..m {
                sym[i][j] = 0.5 * (pb[i][j] + pb[j][i]);
            }
        }
        symmetric_eigenvalues(&mut sym)
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Result of sampling the coercivity bound over the clamp cube.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoercivityCertificate {
    pub min_eigenvalue: f64,
    pub bound: f64,
    pub samples: usize,
}

/// Eigenvalues of a small symmetric matrix by cyclic Jacobi rotations.
/// The matrix is consumed as scratch space.
fn symmetric_eigenvalues(a: &mut [Vec<f64>]) -> Vec<f64> {
    let m = a.len();
    if m == 1 {
        return vec![a[0][0]];
    }
    let frob: f64 = a
        .iter()
        .flat_map(|row| row.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    let target = (frob * 1e-15).max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..m {
            for q in (p + 1)..m {
                off += a[p][q] * a[p][q];
            }
        }
        if off.sqrt() <= target {
            break;
        }
        for p in 0..m {
            for q in (p + 1)..m {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..m {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..m {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..m).map(|i| a[i][i]).collect()
}

/// Builds the dense symmetric rate matrix from unordered pairs, each stated
/// once. Duplicate pairs are rejected so asymmetric inputs cannot hide.
pub fn matrix_from_pairs(
    n: usize,
    pairs: &[(usize, usize, f64)],
) -> Result<Vec<Vec<f64>>, CoefficientError> {
    let m = n + 1;
    let mut k = vec![vec![0.0; m]; m];
    let mut seen = vec![vec![false; m]; m];
    for &(i, j, rate) in pairs {
        if i >= m || j >= m || i == j {
            return Err(CoefficientError::IndexOutOfRange { i, j, species: m });
        }
        if seen[i][j] {
            if k[i][j] != rate {
                return Err(CoefficientError::SymmetryViolation {
                    i,
                    j,
                    left: k[i][j],
                    right: rate,
                });
            }
            return Err(CoefficientError::DuplicatePair { i, j });
        }
        seen[i][j] = true;
        seen[j][i] = true;
        k[i][j] = rate;
        k[j][i] = rate;
    }
    for i in 0..m {
        for j in 0..m {
            if i != j && !seen[i][j] {
                return Err(CoefficientError::MissingRate { i, j });
            }
        }
    }
    Ok(k)
}
