//! Per-response spatial precision matrices and their Gaussian (GMRF)
//! log-densities.
//!
//! Three prior families are supported, all with the precision parameter
//! fixed at `tau = 1` so that the entries of the mixing matrix `M` stay
//! identifiable:
//!
//! * ICAR: `Omega = Q`, improper with rank `n - 1`; densities use the
//!   pseudo-determinant and require sum-to-zero input.
//! * PCAR: `Omega = D - rho * W`, proper for `rho` strictly inside
//!   `(1/d_min, 1/d_max)` where `d_min`, `d_max` bound the spectrum of
//!   `D^{-1/2} W D^{-1/2}`.
//! * BYM2: `Omega = [(1 - lambda) I + lambda * Qs^-]^{-1}` with `Qs^-` the
//!   generalized inverse of the scaled neighbourhood matrix.
//!
//! Density evaluations go through the eigenvalues cached in
//! [`ScaledStructure`], so no matrix factorization happens per call.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::graph::{ArealGraph, GraphError, ScaledStructure};

/// Largest admissible BYM2 mixing weight; at `lambda = 1` the mixture
/// covariance is singular.
pub const BYM2_LAMBDA_MAX: f64 = 1.0 - 1e-6;

const LN_2PI: f64 = 1.837877066409345483560659472811;

#[derive(Debug, Error, PartialEq)]
pub enum PriorError {
    #[error("graph is disconnected")]
    DisconnectedGraph,
    #[error("rho={rho} outside the valid PCAR interval ({lo}, {hi})")]
    RhoOutOfRange { rho: f64, lo: f64, hi: f64 },
    #[error("lambda={0} outside [0, 1 - 1e-6]")]
    LambdaOutOfRange(f64),
    #[error("ICAR density needs a sum-to-zero vector; column mean is {0}")]
    ConstraintViolated(f64),
    #[error("vector length {got} does not match structure dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

impl From<GraphError> for PriorError {
    fn from(_: GraphError) -> Self {
        PriorError::DisconnectedGraph
    }
}

/// Spatial prior family with its current hyperparameter (tau fixed at 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpatialPrior {
    Icar,
    Pcar { rho: f64 },
    Bym2 { lambda: f64 },
}

/// Family tag without a hyperparameter value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PriorKind {
    Icar,
    Pcar,
    Bym2,
}

impl PriorKind {
    pub fn label(&self) -> &'static str {
        match self {
            PriorKind::Icar => "ICAR",
            PriorKind::Pcar => "PCAR",
            PriorKind::Bym2 => "BYM2",
        }
    }

    /// Prior with its hyperparameter set; ICAR takes none.
    pub fn with_hyper(&self, hyper: f64) -> SpatialPrior {
        match self {
            PriorKind::Icar => SpatialPrior::Icar,
            PriorKind::Pcar => SpatialPrior::Pcar { rho: hyper },
            PriorKind::Bym2 => SpatialPrior::Bym2 { lambda: hyper },
        }
    }

    pub fn has_hyper(&self) -> bool {
        !matches!(self, PriorKind::Icar)
    }

    pub fn hyper_name(&self) -> Option<&'static str> {
        match self {
            PriorKind::Icar => None,
            PriorKind::Pcar => Some("rho"),
            PriorKind::Bym2 => Some("lambda"),
        }
    }
}

impl SpatialPrior {
    pub fn kind(&self) -> PriorKind {
        match self {
            SpatialPrior::Icar => PriorKind::Icar,
            SpatialPrior::Pcar { .. } => PriorKind::Pcar,
            SpatialPrior::Bym2 { .. } => PriorKind::Bym2,
        }
    }
}

/// Valid PCAR interval `(1/d_min, 1/d_max)` for a connected graph; the upper
/// bound is 1 because the Perron eigenvalue of the normalized adjacency is 1.
pub fn pcar_valid_range(graph: &ArealGraph) -> Result<(f64, f64), PriorError> {
    let spectrum = graph.normalized_adjacency_spectrum()?;
    Ok(pcar_range_from_spectrum(&spectrum))
}

fn pcar_range_from_spectrum(spectrum: &DVector<f64>) -> (f64, f64) {
    let d_min = spectrum[0];
    let d_max = spectrum[spectrum.len() - 1];
    (1.0 / d_min, 1.0 / d_max)
}

/// Assemble the precision matrix for a prior.
///
/// ICAR returns the rank-deficient `Q` itself; callers must pair it with the
/// sum-to-zero constraint. PCAR accepts the closed valid interval so that
/// the `rho = 1` limit (which equals `Q` entrywise) can be formed even
/// though it no longer defines a proper density. BYM2 inverts the mixture
/// covariance through the cached eigendecomposition.
pub fn precision_matrix(
    spec: &SpatialPrior,
    structure: &ScaledStructure,
) -> Result<DMatrix<f64>, PriorError> {
    let n = structure.n();
    match *spec {
        SpatialPrior::Icar => Ok(structure.q().clone()),
        SpatialPrior::Pcar { rho } => {
            let (lo, hi) = pcar_range_from_spectrum(structure.pcar_spectrum());
            if rho < lo - 1e-9 || rho > hi + 1e-9 {
                return Err(PriorError::RhoOutOfRange { rho, lo, hi });
            }
            let mut omega = DMatrix::<f64>::zeros(n, n);
            for i in 0..n {
                omega[(i, i)] = structure.degree()[i];
            }
            for &(a, b) in structure.edges() {
                omega[(a, b)] = -rho;
                omega[(b, a)] = -rho;
            }
            Ok(omega)
        }
        SpatialPrior::Bym2 { lambda } => {
            if !(0.0..=BYM2_LAMBDA_MAX).contains(&lambda) {
                return Err(PriorError::LambdaOutOfRange(lambda));
            }
            // Covariance (1-l) I + l Qs^- shares eigenvectors with Q, so the
            // inverse is U diag(1/gamma) U'.
            let gammas = bym2_cov_eigenvalues(lambda, structure);
            let u = structure.basis().vectors();
            let mut omega = DMatrix::<f64>::zeros(n, n);
            for c in 0..n {
                let w = 1.0 / gammas[c];
                let col = u.column(c);
                for i in 0..n {
                    for j in 0..=i {
                        omega[(i, j)] += w * col[i] * col[j];
                    }
                }
            }
            for i in 0..n {
                for j in 0..i {
                    omega[(j, i)] = omega[(i, j)];
                }
            }
            Ok(omega)
        }
    }
}

/// Eigenvalues of the BYM2 mixture covariance `(1-l) I + l Qs^-`, in the
/// descending-eigenvalue order of the basis (the constant direction last).
pub fn bym2_cov_eigenvalues(lambda: f64, structure: &ScaledStructure) -> DVector<f64> {
    let basis = structure.basis();
    let sf = structure.scale_factor();
    DVector::from_fn(structure.n(), |c, _| {
        let d = basis.eigenvalues()[c];
        if d > basis.zero_tolerance() {
            (1.0 - lambda) + lambda / (sf * d)
        } else {
            1.0 - lambda
        }
    })
}

/// Log-density of `theta ~ N(0, Omega^{-1})` under the prior, including the
/// `2 pi` constants. ICAR uses the rank `n - 1` improper density with the
/// pseudo-determinant over its nonzero eigenvalues and requires centered
/// input.
pub fn log_density_gmrf(
    theta: &DVector<f64>,
    spec: &SpatialPrior,
    structure: &ScaledStructure,
) -> Result<f64, PriorError> {
    let n = structure.n();
    if theta.len() != n {
        return Err(PriorError::DimensionMismatch {
            expected: n,
            got: theta.len(),
        });
    }
    match *spec {
        SpatialPrior::Icar => {
            let mean = theta.sum() / n as f64;
            let scale = theta.abs().max().max(1.0);
            if mean.abs() > 1e-8 * scale {
                return Err(PriorError::ConstraintViolated(mean));
            }
            let quad = structure.quad_form_q(theta);
            Ok(icar_log_normalizer(structure) - 0.5 * quad)
        }
        SpatialPrior::Pcar { rho } => {
            let (lo, hi) = pcar_range_from_spectrum(structure.pcar_spectrum());
            if rho <= lo || rho >= hi {
                return Err(PriorError::RhoOutOfRange { rho, lo, hi });
            }
            let quad = pcar_quad_form(theta, rho, structure);
            Ok(pcar_log_normalizer(rho, structure) - 0.5 * quad)
        }
        SpatialPrior::Bym2 { lambda } => {
            if !(0.0..=BYM2_LAMBDA_MAX).contains(&lambda) {
                return Err(PriorError::LambdaOutOfRange(lambda));
            }
            let coefs = structure.basis().vectors().transpose() * theta;
            let gammas = bym2_cov_eigenvalues(lambda, structure);
            let mut quad = 0.0;
            for c in 0..n {
                quad += coefs[c] * coefs[c] / gammas[c];
            }
            Ok(bym2_log_normalizer(lambda, structure) - 0.5 * quad)
        }
    }
}

/// `0.5 log pdet(Q) - (n-1)/2 log(2 pi)`.
pub fn icar_log_normalizer(structure: &ScaledStructure) -> f64 {
    let basis = structure.basis();
    let mut log_pdet = 0.0;
    let mut rank = 0usize;
    for d in basis.eigenvalues().iter() {
        if *d > basis.zero_tolerance() {
            log_pdet += d.ln();
            rank += 1;
        }
    }
    0.5 * log_pdet - 0.5 * rank as f64 * LN_2PI
}

/// `theta' (D - rho W) theta` via degrees and edges.
pub fn pcar_quad_form(theta: &DVector<f64>, rho: f64, structure: &ScaledStructure) -> f64 {
    let mut quad = 0.0;
    for (i, d) in structure.degree().iter().enumerate() {
        quad += d * theta[i] * theta[i];
    }
    for &(a, b) in structure.edges() {
        quad -= 2.0 * rho * theta[a] * theta[b];
    }
    quad
}

/// `0.5 log det(D - rho W) - n/2 log(2 pi)` via
/// `det(D - rho W) = det(D) prod_i (1 - rho g_i)`.
pub fn pcar_log_normalizer(rho: f64, structure: &ScaledStructure) -> f64 {
    let n = structure.n() as f64;
    let mut log_det: f64 = structure.degree().iter().map(|d| d.ln()).sum();
    for g in structure.pcar_spectrum().iter() {
        log_det += (1.0 - rho * g).ln();
    }
    0.5 * log_det - 0.5 * n * LN_2PI
}

/// `0.5 log det(Omega_bym2) - n/2 log(2 pi)`.
pub fn bym2_log_normalizer(lambda: f64, structure: &ScaledStructure) -> f64 {
    let n = structure.n() as f64;
    let gammas = bym2_cov_eigenvalues(lambda, structure);
    let log_det: f64 = -gammas.iter().map(|g| g.ln()).sum::<f64>();
    0.5 * log_det - 0.5 * n * LN_2PI
}
