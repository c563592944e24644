//! The multivariate M-model: `Theta = Phi * M`, Bartlett-parameterized
//! between-response covariance, identifiability constraints, and the full
//! unnormalized log-posterior.
//!
//! The columns of `Phi` (one per response) are independent spatial fields
//! with unit precision parameter; the `J x J` matrix `M` mixes them into the
//! latent effects `Theta`, inducing between-response correlation with
//! `Sigma_b = M'M`. `Sigma_b` carries a `Wishart(J, sigma^2 I_J)` prior
//! realized through the Bartlett factor `A` (chi diagonal, standard-normal
//! lower triangle), so only `J(J+1)/2` scalars are sampled. `M` is the
//! symmetric eigenvalue square root of `Sigma_b`, which keeps results
//! invariant under reordering of the responses (a Cholesky factor would
//! not be).

use nalgebra::{DMatrix, DVector};
use std::sync::Arc;
use thiserror::Error;

use crate::graph::ScaledStructure;
use crate::priors::{log_density_gmrf, PriorError, PriorKind};
use crate::util::ln_gamma;

const LN_2PI: f64 = 1.837877066409345483560659472811;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("Bartlett diagonal entry {index} is not positive: {value}")]
    NonPositiveDiagonal { index: usize, value: f64 },
    #[error("matrix is not positive definite")]
    NotPD,
    #[error("mixing matrix M is singular")]
    SingularM,
    #[error("linear predictor overflowed (non-finite)")]
    NonFinitePredictor,
    #[error("invalid counts: {0}")]
    InvalidCounts(String),
    #[error(transparent)]
    Prior(#[from] PriorError),
}

/// Observed and expected counts, `n x J`, validated at construction:
/// counts are non-negative integers, expecteds strictly positive.
#[derive(Debug, Clone)]
pub struct ArealCounts {
    y: DMatrix<f64>,
    e: DMatrix<f64>,
    log_e: DMatrix<f64>,
}

impl ArealCounts {
    pub fn new(y: DMatrix<f64>, e: DMatrix<f64>) -> Result<Self, ModelError> {
        if y.shape() != e.shape() {
            return Err(ModelError::DimensionMismatch(format!(
                "counts {:?} vs expected {:?}",
                y.shape(),
                e.shape()
            )));
        }
        for v in y.iter() {
            if !v.is_finite() || *v < 0.0 || v.fract() != 0.0 {
                return Err(ModelError::InvalidCounts(format!(
                    "count {v} is not a non-negative integer"
                )));
            }
        }
        for v in e.iter() {
            if !v.is_finite() || *v <= 0.0 {
                return Err(ModelError::InvalidCounts(format!(
                    "expected count {v} is not positive"
                )));
            }
        }
        let log_e = e.map(f64::ln);
        Ok(ArealCounts { y, e, log_e })
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn j(&self) -> usize {
        self.y.ncols()
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn e(&self) -> &DMatrix<f64> {
        &self.e
    }

    pub fn log_e(&self) -> &DMatrix<f64> {
        &self.log_e
    }
}

/// Full model description: graph structure, per-response prior family and
/// design vector, and the fixed prior constants.
///
/// Each response gets a single design vector (the decorrelated covariate
/// `Z_j`, or the raw covariate for the spatial baseline). Extending to
/// several covariates per response would turn `designs` into a list of
/// design matrices; nothing else in the posterior changes shape.
#[derive(Debug, Clone)]
pub struct MModelSpec {
    pub structure: Arc<ScaledStructure>,
    pub priors: Vec<PriorKind>,
    pub designs: Vec<DVector<f64>>,
    /// Precision of the zero-centered normal prior on each intercept and
    /// regression coefficient.
    pub fixed_effect_precision: f64,
    /// Degrees of freedom of the Wishart prior on `Sigma_b`; the model uses
    /// `nu = J`.
    pub wishart_dof: usize,
    /// `sigma^2` in `Wishart(J, sigma^2 I_J)`.
    pub wishart_scale_sigma2: f64,
    /// When false the spatial field (and with it the Bartlett layer) is
    /// dropped, leaving a Bayesian Poisson GLM. Used for baseline checks.
    pub include_spatial: bool,
}

impl MModelSpec {
    pub fn new(
        structure: Arc<ScaledStructure>,
        priors: Vec<PriorKind>,
        designs: Vec<DVector<f64>>,
    ) -> Result<Self, ModelError> {
        let j = priors.len();
        if j == 0 {
            return Err(ModelError::DimensionMismatch(
                "need at least one response".into(),
            ));
        }
        if designs.len() != j {
            return Err(ModelError::DimensionMismatch(format!(
                "{} priors but {} designs",
                j,
                designs.len()
            )));
        }
        for d in &designs {
            if d.len() != structure.n() {
                return Err(ModelError::DimensionMismatch(format!(
                    "design length {} vs n={}",
                    d.len(),
                    structure.n()
                )));
            }
        }
        Ok(MModelSpec {
            structure,
            priors,
            designs,
            fixed_effect_precision: 0.001,
            wishart_dof: j,
            wishart_scale_sigma2: 1000.0,
            include_spatial: true,
        })
    }

    pub fn n(&self) -> usize {
        self.structure.n()
    }

    pub fn j(&self) -> usize {
        self.priors.len()
    }
}

/// Bartlett factor of the Wishart draw: positive chi-distributed diagonal
/// `c_j` and standard-normal strict lower triangle, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BartlettFactor {
    pub diag: Vec<f64>,
    pub offdiag: Vec<f64>,
}

impl BartlettFactor {
    pub fn identity(j: usize) -> Self {
        BartlettFactor {
            diag: vec![1.0; j],
            offdiag: vec![0.0; j * (j - 1) / 2],
        }
    }

    pub fn j(&self) -> usize {
        self.diag.len()
    }

    /// Assemble the lower-triangular matrix `A`.
    pub fn matrix(&self) -> Result<DMatrix<f64>, ModelError> {
        let j = self.j();
        if self.offdiag.len() != j * (j - 1) / 2 {
            return Err(ModelError::DimensionMismatch(format!(
                "{} off-diagonal entries for J={}",
                self.offdiag.len(),
                j
            )));
        }
        let mut a = DMatrix::<f64>::zeros(j, j);
        for (idx, &c) in self.diag.iter().enumerate() {
            if !(c > 0.0) {
                return Err(ModelError::NonPositiveDiagonal {
                    index: idx,
                    value: c,
                });
            }
            a[(idx, idx)] = c;
        }
        let mut k = 0;
        for r in 1..j {
            for c in 0..r {
                a[(r, c)] = self.offdiag[k];
                k += 1;
            }
        }
        Ok(a)
    }
}

/// One point in parameter space.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    pub phi: DMatrix<f64>,
    pub bartlett: BartlettFactor,
    /// Per-response `rho_j` or `lambda_j`; ignored for ICAR responses.
    pub hyper: Vec<f64>,
}

/// `Sigma_b = sigma^2 A A'`.
pub fn sigma_from_bartlett(b: &BartlettFactor, sigma2: f64) -> Result<DMatrix<f64>, ModelError> {
    let a = b.matrix()?;
    Ok((&a * a.transpose()) * sigma2)
}

/// Symmetric square root of an SPD matrix through its eigendecomposition:
/// `M = V sqrt(Lambda) V'` with `M M = Sigma_b`.
pub fn m_from_sigma(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>, ModelError> {
    let j = sigma.nrows();
    if sigma.ncols() != j {
        return Err(ModelError::DimensionMismatch(
            "Sigma_b must be square".into(),
        ));
    }
    let eig = sigma.clone().symmetric_eigen();
    for v in eig.eigenvalues.iter() {
        if *v <= 0.0 {
            return Err(ModelError::NotPD);
        }
    }
    let mut m = DMatrix::<f64>::zeros(j, j);
    for c in 0..j {
        let s = eig.eigenvalues[c].sqrt();
        let v = eig.eigenvectors.column(c);
        for r in 0..j {
            for r2 in 0..j {
                m[(r, r2)] += s * v[r] * v[r2];
            }
        }
    }
    Ok(m)
}

/// Stack `Theta = Phi M` column-major into a length `n*J` vector
/// (response-major ordering `(theta_1', ..., theta_J')'`).
pub fn theta_from_phi(phi: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<DVector<f64>, ModelError> {
    if phi.ncols() != m.nrows() {
        return Err(ModelError::DimensionMismatch(format!(
            "Phi is {}x{} but M is {}x{}",
            phi.nrows(),
            phi.ncols(),
            m.nrows(),
            m.ncols()
        )));
    }
    let theta = phi * m;
    let (n, j) = theta.shape();
    let mut out = DVector::<f64>::zeros(n * j);
    for c in 0..j {
        for r in 0..n {
            out[c * n + r] = theta[(r, c)];
        }
    }
    Ok(out)
}

/// Joint precision of the stacked latent field:
/// `Omega_theta = (M^{-1} (x) I_n) Blockdiag(Omega_1..Omega_J) (M^{-1} (x) I_n)'`.
pub fn omega_theta(m: &DMatrix<f64>, omegas: &[DMatrix<f64>]) -> Result<DMatrix<f64>, ModelError> {
    let j = m.nrows();
    if m.ncols() != j || omegas.len() != j {
        return Err(ModelError::DimensionMismatch(format!(
            "M is {}x{} with {} precision blocks",
            m.nrows(),
            m.ncols(),
            omegas.len()
        )));
    }
    let n = omegas[0].nrows();
    for o in omegas {
        if o.nrows() != n || o.ncols() != n {
            return Err(ModelError::DimensionMismatch(
                "precision blocks must share dimensions".into(),
            ));
        }
    }
    let m_inv = m.clone().try_inverse().ok_or(ModelError::SingularM)?;
    // Block (a, b) of the product is sum_l minv[a,l] minv[b,l] Omega_l.
    let mut out = DMatrix::<f64>::zeros(n * j, n * j);
    for a in 0..j {
        for b in 0..j {
            let mut block = DMatrix::<f64>::zeros(n, n);
            for (l, omega) in omegas.iter().enumerate() {
                let w = m_inv[(a, l)] * m_inv[(b, l)];
                if w != 0.0 {
                    block += omega * w;
                }
            }
            out.view_mut((a * n, b * n), (n, n)).copy_from(&block);
        }
    }
    Ok(out)
}

/// Center every column of `Phi` (subtract column means). Idempotent.
pub fn apply_sum_to_zero(phi: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = phi.clone();
    center_columns(&mut out);
    out
}

pub fn center_columns(phi: &mut DMatrix<f64>) {
    let n = phi.nrows();
    for mut col in phi.column_iter_mut() {
        let mean = col.sum() / n as f64;
        col.add_scalar_mut(-mean);
    }
}

/// Additive pieces of the log-posterior.
#[derive(Debug, Clone, Copy)]
pub struct LogPosteriorParts {
    pub loglik: f64,
    pub phi_prior: f64,
    pub bartlett_prior: f64,
    pub fixed_prior: f64,
    pub hyper_prior: f64,
}

impl LogPosteriorParts {
    pub fn total(&self) -> f64 {
        self.loglik + self.phi_prior + self.bartlett_prior + self.fixed_prior + self.hyper_prior
    }
}

/// Log-density of `chi_k` at `x > 0`.
pub fn chi_log_density(x: f64, k: f64) -> f64 {
    (k - 1.0) * x.ln() - 0.5 * x * x - (0.5 * k - 1.0) * 2.0f64.ln() - ln_gamma(0.5 * k)
}

fn std_normal_log_density(x: f64) -> f64 {
    -0.5 * x * x - 0.5 * LN_2PI
}

/// Poisson log-likelihood `sum_ij [Y log mu - mu]` (log Y! omitted) for the
/// linear predictor `log mu_ij = log e_ij + alpha_j + beta_j z_ij + theta_ij`.
pub fn poisson_loglik(
    data: &ArealCounts,
    spec: &MModelSpec,
    alpha: &DVector<f64>,
    beta: &DVector<f64>,
    theta: Option<&DMatrix<f64>>,
) -> Result<f64, ModelError> {
    let (n, j) = (data.n(), data.j());
    let mut total = 0.0;
    for c in 0..j {
        let z = &spec.designs[c];
        for r in 0..n {
            let mut eta = alpha[c] + beta[c] * z[r];
            if let Some(t) = theta {
                eta += t[(r, c)];
            }
            let log_mu = data.log_e()[(r, c)] + eta;
            let mu = log_mu.exp();
            if !mu.is_finite() {
                return Err(ModelError::NonFinitePredictor);
            }
            total += data.y()[(r, c)] * log_mu - mu;
        }
    }
    Ok(total)
}

/// Full unnormalized log-posterior, decomposed into its additive parts.
pub fn log_posterior_parts(
    state: &LatentState,
    spec: &MModelSpec,
    data: &ArealCounts,
) -> Result<LogPosteriorParts, ModelError> {
    let (n, j) = (spec.n(), spec.j());
    if data.n() != n || data.j() != j {
        return Err(ModelError::DimensionMismatch(format!(
            "data {}x{} vs model {}x{}",
            data.n(),
            data.j(),
            n,
            j
        )));
    }

    let mut phi_prior = 0.0;
    let mut bartlett_prior = 0.0;
    let hyper_prior = 0.0; // Unif(0,1) hyperpriors contribute zero on their support.
    let theta_mat;
    let theta = if spec.include_spatial {
        let sigma = sigma_from_bartlett(&state.bartlett, spec.wishart_scale_sigma2)?;
        let m = m_from_sigma(&sigma)?;
        theta_mat = &state.phi * &m;

        for c in 0..j {
            let prior = spec.priors[c].with_hyper(state.hyper[c]);
            let col = state.phi.column(c).clone_owned();
            phi_prior += log_density_gmrf(&col, &prior, &spec.structure)?;
        }
        let nu = spec.wishart_dof as f64;
        for (idx, &c) in state.bartlett.diag.iter().enumerate() {
            if !(c > 0.0) {
                return Err(ModelError::NonPositiveDiagonal {
                    index: idx,
                    value: c,
                });
            }
            bartlett_prior += chi_log_density(c, nu - idx as f64);
        }
        for &x in &state.bartlett.offdiag {
            bartlett_prior += std_normal_log_density(x);
        }
        Some(&theta_mat)
    } else {
        None
    };

    let loglik = poisson_loglik(data, spec, &state.alpha, &state.beta, theta)?;

    let prec = spec.fixed_effect_precision;
    let fixed_const = -0.5 * (LN_2PI - prec.ln());
    let mut fixed_prior = 0.0;
    for c in 0..j {
        fixed_prior += fixed_const - 0.5 * prec * state.alpha[c] * state.alpha[c];
        fixed_prior += fixed_const - 0.5 * prec * state.beta[c] * state.beta[c];
    }

    Ok(LogPosteriorParts {
        loglik,
        phi_prior,
        bartlett_prior,
        fixed_prior,
        hyper_prior,
    })
}

/// Full unnormalized log-posterior.
pub fn log_posterior(
    state: &LatentState,
    spec: &MModelSpec,
    data: &ArealCounts,
) -> Result<f64, ModelError> {
    Ok(log_posterior_parts(state, spec, data)?.total())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ArealGraph;
    use crate::priors::PriorKind;
    use crate::testutil;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::{ChiSquared, Distribution, StandardNormal};

    fn grid_spec(rows: usize, cols: usize, priors: Vec<PriorKind>) -> MModelSpec {
        let g = ArealGraph::grid(rows, cols).unwrap();
        let s = Arc::new(ScaledStructure::build(&g).unwrap());
        let n = s.n();
        let j = priors.len();
        let mut rng = crate::rng::stream_rng(90, &[1]);
        let designs: Vec<DVector<f64>> = (0..j)
            .map(|_| {
                let mut z = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
                let mean = z.sum() / n as f64;
                z.add_scalar_mut(-mean);
                z
            })
            .collect();
        MModelSpec::new(s, priors, designs).unwrap()
    }

    #[test]
    fn sigma_identity_bartlett() {
        let b = BartlettFactor::identity(3);
        let sigma = sigma_from_bartlett(&b, 1.0).unwrap();
        assert_eq!(sigma, DMatrix::identity(3, 3));
    }

    #[test]
    fn sigma_hand_product() {
        let b = BartlettFactor {
            diag: vec![2.0, 1.0],
            offdiag: vec![1.0],
        };
        let sigma = sigma_from_bartlett(&b, 1.0).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 2.0]);
        assert!((sigma - expect).abs().max() < 1e-14);
    }

    #[test]
    fn sigma_rejects_nonpositive_diagonal() {
        let b = BartlettFactor {
            diag: vec![1.0, 0.0],
            offdiag: vec![0.3],
        };
        assert!(matches!(
            sigma_from_bartlett(&b, 1.0),
            Err(ModelError::NonPositiveDiagonal { index: 1, .. })
        ));
    }

    #[test]
    fn bartlett_monte_carlo_matches_wishart_mean() {
        // c_1 ~ chi_2, c_2 ~ chi_1, n21 ~ N(0,1), sigma^2 = 1, nu = J = 2:
        // E[Sigma_b] = nu V = 2 I.
        let mut rng = crate::rng::stream_rng(77, &[5]);
        let chi2_2 = ChiSquared::new(2.0).unwrap();
        let chi2_1 = ChiSquared::new(1.0).unwrap();
        let draws = 100_000;
        let mut sums = [0.0f64; 3]; // s11, s12, s22
        let mut sq = [0.0f64; 3];
        for _ in 0..draws {
            let c1: f64 = chi2_2.sample(&mut rng);
            let c2: f64 = chi2_1.sample(&mut rng);
            let n21: f64 = StandardNormal.sample(&mut rng);
            let b = BartlettFactor {
                diag: vec![c1.sqrt(), c2.sqrt()],
                offdiag: vec![n21],
            };
            let s = sigma_from_bartlett(&b, 1.0).unwrap();
            let vals = [s[(0, 0)], s[(0, 1)], s[(1, 1)]];
            for (i, v) in vals.iter().enumerate() {
                sums[i] += v;
                sq[i] += v * v;
            }
        }
        let expect = [2.0, 0.0, 2.0];
        for i in 0..3 {
            let mean = sums[i] / draws as f64;
            let var = sq[i] / draws as f64 - mean * mean;
            let se = (var / draws as f64).sqrt();
            assert!(
                (mean - expect[i]).abs() < 3.0 * se,
                "entry {i}: mean {mean} expect {} se {se}",
                expect[i]
            );
        }
    }

    #[test]
    fn m_examples() {
        assert_eq!(
            m_from_sigma(&DMatrix::identity(2, 2)).unwrap(),
            DMatrix::identity(2, 2)
        );
        let m = m_from_sigma(&DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0])).unwrap();
        assert!(
            (m - DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]))
                .abs()
                .max()
                < 1e-12
        );
        // Sigma = [[2,1],[1,2]] has eigenvalues (3,1); M = V diag(sqrt3, 1) V'.
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let m = m_from_sigma(&sigma).unwrap();
        assert!((&m * &m - &sigma).abs().max() < 1e-12);
        assert!((&m - m.transpose()).abs().max() < 1e-14);
        // Non-PD rejected.
        assert!(matches!(
            m_from_sigma(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])),
            Err(ModelError::NotPD)
        ));
    }

    #[test]
    fn m_round_trip_reproduces_sigma() {
        let mut rng = crate::rng::stream_rng(8, &[2]);
        for _ in 0..20 {
            let b = BartlettFactor {
                diag: vec![
                    rng.random::<f64>() + 0.2,
                    rng.random::<f64>() + 0.2,
                    rng.random::<f64>() + 0.2,
                ],
                offdiag: vec![
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                ],
            };
            let sigma = sigma_from_bartlett(&b, 3.7).unwrap();
            let m = m_from_sigma(&sigma).unwrap();
            assert!((m.transpose() * &m - &sigma).abs().max() < 1e-10);
        }
    }

    #[test]
    fn theta_stacking_order() {
        // Phi = I_2, M = [[a,b],[c,d]] -> Theta = M, stacked (a, c, b, d).
        let phi = DMatrix::identity(2, 2);
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let theta = theta_from_phi(&phi, &m).unwrap();
        assert_eq!(theta.as_slice(), &[1.0, 3.0, 2.0, 4.0]);
        // M = I passes Phi through.
        let phi = DMatrix::from_row_slice(2, 2, &[0.5, -1.0, 2.0, 0.25]);
        let theta = theta_from_phi(&phi, &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(theta.as_slice(), &[0.5, 2.0, -1.0, 0.25]);
    }

    #[test]
    fn theta_matches_kronecker_identity() {
        // vec(Phi M) = (M' (x) I_n) vec(Phi), checked against an explicitly
        // assembled Kronecker product.
        let mut rng = crate::rng::stream_rng(4, &[4]);
        let n = 3;
        let j = 2;
        let phi = DMatrix::from_fn(n, j, |_, _| rng.random::<f64>() - 0.5);
        let m = DMatrix::from_fn(j, j, |_, _| rng.random::<f64>() - 0.5);
        let theta = theta_from_phi(&phi, &m).unwrap();

        let mut kron = DMatrix::<f64>::zeros(n * j, n * j);
        let mt = m.transpose();
        for a in 0..j {
            for b in 0..j {
                for r in 0..n {
                    kron[(a * n + r, b * n + r)] = mt[(a, b)];
                }
            }
        }
        let mut vec_phi = DVector::<f64>::zeros(n * j);
        for c in 0..j {
            for r in 0..n {
                vec_phi[c * n + r] = phi[(r, c)];
            }
        }
        let oracle = kron * vec_phi;
        assert!((theta - oracle).abs().max() < 1e-12);
    }

    #[test]
    fn omega_theta_single_response_passthrough() {
        let g = ArealGraph::from_edge_list(2, &[(0, 1)]).unwrap();
        let q = g.icar_structure().unwrap();
        let out = omega_theta(&DMatrix::identity(1, 1), &[q.clone()]).unwrap();
        assert_eq!(out, q);
    }

    #[test]
    fn omega_theta_separable_for_equal_blocks() {
        // With Omega_1 = Omega_2 = Q the joint precision is Sigma_b^{-1} (x) Q.
        let g = ArealGraph::from_edge_list(2, &[(0, 1)]).unwrap();
        let q = g.icar_structure().unwrap();
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let m = m_from_sigma(&sigma).unwrap();
        let out = omega_theta(&m, &[q.clone(), q.clone()]).unwrap();

        let sigma_inv = sigma.clone().try_inverse().unwrap();
        let mut oracle = DMatrix::<f64>::zeros(4, 4);
        for a in 0..2 {
            for b in 0..2 {
                for r in 0..2 {
                    for c in 0..2 {
                        oracle[(a * 2 + r, b * 2 + c)] = sigma_inv[(a, b)] * q[(r, c)];
                    }
                }
            }
        }
        assert!((out - oracle).abs().max() < 1e-10);
    }

    #[test]
    fn omega_theta_not_separable_for_unequal_blocks() {
        use crate::priors::{precision_matrix, SpatialPrior};
        let g = ArealGraph::grid(2, 2).unwrap();
        let s = ScaledStructure::build(&g).unwrap();
        let o1 = precision_matrix(&SpatialPrior::Pcar { rho: 0.3 }, &s).unwrap();
        let o2 = precision_matrix(&SpatialPrior::Pcar { rho: 0.8 }, &s).unwrap();
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.0]);
        let m = m_from_sigma(&sigma).unwrap();
        let out = omega_theta(&m, &[o1, o2]).unwrap();

        // A Kronecker product S (x) K has all blocks proportional to one
        // another; measure the residual of the best proportional fit of the
        // off-diagonal block on the leading diagonal block.
        let n = 4;
        let b11 = out.view((0, 0), (n, n)).clone_owned();
        let b12 = out.view((0, n), (n, n)).clone_owned();
        let scale = b11.dot(&b12) / b11.dot(&b11);
        let residual = (&b12 - &b11 * scale).norm();
        assert!(
            residual > 1e-3,
            "blocks unexpectedly proportional, residual {residual}"
        );
    }

    #[test]
    fn sum_to_zero_examples() {
        let phi = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let centered = apply_sum_to_zero(&phi);
        assert_eq!(centered.column(0).as_slice(), &[-1.0, 0.0, 1.0]);
        // Idempotent.
        let again = apply_sum_to_zero(&centered);
        assert_eq!(again, centered);
        // Constant column goes to zero.
        let constant = DMatrix::from_column_slice(3, 1, &[5.0, 5.0, 5.0]);
        assert!(apply_sum_to_zero(&constant).abs().max() < 1e-15);
    }

    fn zero_state(spec: &MModelSpec) -> LatentState {
        LatentState {
            alpha: DVector::zeros(spec.j()),
            beta: DVector::zeros(spec.j()),
            phi: DMatrix::zeros(spec.n(), spec.j()),
            bartlett: BartlettFactor::identity(spec.j()),
            hyper: vec![0.5; spec.j()],
        }
    }

    fn toy_data(spec: &MModelSpec, seed: u64) -> ArealCounts {
        let mut rng = crate::rng::stream_rng(seed, &[17]);
        let (n, j) = (spec.n(), spec.j());
        let e = DMatrix::from_fn(n, j, |_, _| 20.0 + 40.0 * rng.random::<f64>());
        let y = e.map(|v| (v * (0.5 + rng.random::<f64>())).round());
        ArealCounts::new(y, e).unwrap()
    }

    #[test]
    fn likelihood_at_null_state_is_minus_total_expected() {
        let spec = grid_spec(2, 3, vec![PriorKind::Icar, PriorKind::Icar]);
        let n = spec.n();
        let e = DMatrix::from_fn(n, 2, |r, c| 10.0 + (r + c) as f64);
        let y = DMatrix::zeros(n, 2);
        let data = ArealCounts::new(y, e.clone()).unwrap();
        let parts = log_posterior_parts(&zero_state(&spec), &spec, &data).unwrap();
        assert_relative_eq!(parts.loglik, -e.sum(), epsilon = 1e-10);
    }

    #[test]
    fn alpha_perturbation_matches_analytic_difference() {
        let spec = grid_spec(2, 3, vec![PriorKind::Icar, PriorKind::Icar]);
        let data = toy_data(&spec, 3);
        let state = zero_state(&spec);
        let base = log_posterior_parts(&state, &spec, &data).unwrap();
        let delta = 0.07;
        let mut bumped = state.clone();
        bumped.alpha[0] += delta;
        let after = log_posterior_parts(&bumped, &spec, &data).unwrap();

        // Sum_i [Y_i1 delta - e_i1 r_i1 (e^delta - 1)] with r_i1 = 1 here.
        let mut expect = 0.0;
        for r in 0..spec.n() {
            expect += data.y()[(r, 0)] * delta - data.e()[(r, 0)] * (delta.exp() - 1.0);
        }
        assert_relative_eq!(after.loglik - base.loglik, expect, epsilon = 1e-10);
    }

    #[test]
    fn beta_gradient_matches_finite_differences() {
        let spec = grid_spec(2, 3, vec![PriorKind::Icar, PriorKind::Icar]);
        let data = toy_data(&spec, 9);
        let mut state = zero_state(&spec);
        state.alpha[0] = 0.1;
        state.beta[0] = -0.2;
        state.beta[1] = 0.15;

        for c in 0..2 {
            // Analytic: d loglik / d beta_j = sum_i z_ij (y_ij - mu_ij).
            let mut analytic = 0.0;
            for r in 0..spec.n() {
                let eta = state.alpha[c] + state.beta[c] * spec.designs[c][r];
                let mu = data.e()[(r, c)] * eta.exp();
                analytic += spec.designs[c][r] * (data.y()[(r, c)] - mu);
            }
            let h = 1e-6;
            let mut plus = state.clone();
            plus.beta[c] += h;
            let mut minus = state.clone();
            minus.beta[c] -= h;
            let fd = (log_posterior_parts(&plus, &spec, &data).unwrap().loglik
                - log_posterior_parts(&minus, &spec, &data).unwrap().loglik)
                / (2.0 * h);
            assert_relative_eq!(fd, analytic, max_relative = 1e-5);
        }
    }

    #[test]
    fn doubling_expected_shifts_only_likelihood() {
        let spec = grid_spec(2, 3, vec![PriorKind::Icar, PriorKind::Icar]);
        let data = toy_data(&spec, 21);
        let mut rng = crate::rng::stream_rng(33, &[1]);
        let mut state = zero_state(&spec);
        state.alpha[0] = 0.05;
        state.beta[1] = -0.1;
        let mut phi = DMatrix::from_fn(spec.n(), 2, |_, _| 0.2 * (rng.random::<f64>() - 0.5));
        center_columns(&mut phi);
        state.phi = phi;

        let doubled = ArealCounts::new(data.y().clone(), data.e() * 2.0).unwrap();
        let base = log_posterior_parts(&state, &spec, &data).unwrap();
        let after = log_posterior_parts(&state, &spec, &doubled).unwrap();

        // Exact shift: sum Y log 2 - sum e r (doubling the rate term).
        let sigma = sigma_from_bartlett(&state.bartlett, spec.wishart_scale_sigma2).unwrap();
        let m = m_from_sigma(&sigma).unwrap();
        let theta = &state.phi * &m;
        let mut mu_sum = 0.0;
        for c in 0..2 {
            for r in 0..spec.n() {
                let eta = state.alpha[c] + state.beta[c] * spec.designs[c][r] + theta[(r, c)];
                mu_sum += data.e()[(r, c)] * eta.exp();
            }
        }
        let expect = data.y().sum() * 2.0f64.ln() - mu_sum;
        assert_relative_eq!(after.loglik - base.loglik, expect, epsilon = 1e-8);
        assert_relative_eq!(after.phi_prior, base.phi_prior, epsilon = 1e-12);
        assert_relative_eq!(after.bartlett_prior, base.bartlett_prior, epsilon = 1e-12);
        assert_relative_eq!(after.fixed_prior, base.fixed_prior, epsilon = 1e-12);
    }

    #[test]
    fn crime_order_invariance() {
        // Swapping the two responses everywhere leaves the likelihood, field
        // prior and fixed-effect prior unchanged; the symmetric square root
        // commutes with permutations.
        let g = ArealGraph::grid(2, 3).unwrap();
        let s = Arc::new(ScaledStructure::build(&g).unwrap());
        let n = s.n();
        let mut rng = crate::rng::stream_rng(55, &[2]);
        let z1 = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        let z2 = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        let z1 = &z1 - DVector::from_element(n, z1.sum() / n as f64);
        let z2 = &z2 - DVector::from_element(n, z2.sum() / n as f64);

        let spec12 = MModelSpec::new(
            s.clone(),
            vec![PriorKind::Icar, PriorKind::Icar],
            vec![z1.clone(), z2.clone()],
        )
        .unwrap();
        let spec21 = MModelSpec::new(
            s.clone(),
            vec![PriorKind::Icar, PriorKind::Icar],
            vec![z2.clone(), z1.clone()],
        )
        .unwrap();

        let data = toy_data(&spec12, 5);
        let swapped = ArealCounts::new(
            DMatrix::from_fn(n, 2, |r, c| data.y()[(r, 1 - c)]),
            DMatrix::from_fn(n, 2, |r, c| data.e()[(r, 1 - c)]),
        )
        .unwrap();

        let mut phi = DMatrix::from_fn(n, 2, |_, _| 0.3 * (rng.random::<f64>() - 0.5));
        center_columns(&mut phi);
        // Permuting responses conjugates Sigma_b by the permutation; realize
        // the swapped Bartlett scalars through the Cholesky factor of the
        // permuted matrix.
        let b = BartlettFactor {
            diag: vec![1.3, 0.7],
            offdiag: vec![0.4],
        };
        let sigma = sigma_from_bartlett(&b, spec12.wishart_scale_sigma2).unwrap();
        let sigma_swapped = DMatrix::from_row_slice(
            2,
            2,
            &[sigma[(1, 1)], sigma[(0, 1)], sigma[(0, 1)], sigma[(0, 0)]],
        );
        let chol = (sigma_swapped.clone() / spec12.wishart_scale_sigma2)
            .cholesky()
            .unwrap();
        let l = chol.l();
        let b_swapped = BartlettFactor {
            diag: vec![l[(0, 0)], l[(1, 1)]],
            offdiag: vec![l[(1, 0)]],
        };

        let state12 = LatentState {
            alpha: DVector::from_vec(vec![0.1, -0.2]),
            beta: DVector::from_vec(vec![0.3, 0.05]),
            phi: phi.clone(),
            bartlett: b,
            hyper: vec![0.5, 0.5],
        };
        let state21 = LatentState {
            alpha: DVector::from_vec(vec![-0.2, 0.1]),
            beta: DVector::from_vec(vec![0.05, 0.3]),
            phi: DMatrix::from_fn(n, 2, |r, c| phi[(r, 1 - c)]),
            bartlett: b_swapped,
            hyper: vec![0.5, 0.5],
        };

        let p12 = log_posterior_parts(&state12, &spec12, &data).unwrap();
        let p21 = log_posterior_parts(&state21, &spec21, &swapped).unwrap();
        assert_relative_eq!(p12.loglik, p21.loglik, epsilon = 1e-8);
        assert_relative_eq!(p12.phi_prior, p21.phi_prior, epsilon = 1e-8);
        assert_relative_eq!(p12.fixed_prior, p21.fixed_prior, epsilon = 1e-10);
    }

    #[test]
    fn theta_covariance_identity_monte_carlo() {
        // Empirical covariance of theta = vec(Phi M) over simulated ICAR
        // fields matches block (a,b) = sum_l M[l,a] M[l,b] Q^- on the
        // centered subspace.
        let g = ArealGraph::grid(2, 3).unwrap();
        let s = ScaledStructure::build(&g).unwrap();
        let n = 6;
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 0.8]);
        let m = m_from_sigma(&sigma).unwrap();
        let qinv = testutil::jacobi_pseudo_inverse(s.q());

        let draws = 20_000;
        let mut rng = crate::rng::stream_rng(13, &[6]);
        let basis = s.basis();
        let mut sum = DMatrix::<f64>::zeros(n * 2, n * 2);
        let mut sum_sq = DMatrix::<f64>::zeros(n * 2, n * 2);
        for _ in 0..draws {
            // Sample each Phi column from N(0, Q^-) spectrally.
            let mut phi = DMatrix::<f64>::zeros(n, 2);
            for c in 0..2 {
                for k in 0..n {
                    let d = basis.eigenvalues()[k];
                    if d > basis.zero_tolerance() {
                        let zn: f64 = StandardNormal.sample(&mut rng);
                        let w = zn / d.sqrt();
                        for r in 0..n {
                            phi[(r, c)] += w * basis.vectors()[(r, k)];
                        }
                    }
                }
            }
            let theta = theta_from_phi(&phi, &m).unwrap();
            for a in 0..n * 2 {
                for b in 0..=a {
                    let v = theta[a] * theta[b];
                    sum[(a, b)] += v;
                    sum_sq[(a, b)] += v * v;
                }
            }
        }

        for a in 0..n * 2 {
            for b in 0..=a {
                let (ca, ra) = (a / n, a % n);
                let (cb, rb) = (b / n, b % n);
                let mut expect = 0.0;
                for l in 0..2 {
                    expect += m[(l, ca)] * m[(l, cb)] * qinv[(ra, rb)];
                }
                let mean = sum[(a, b)] / draws as f64;
                let var = sum_sq[(a, b)] / draws as f64 - mean * mean;
                let se = (var / draws as f64).sqrt().max(1e-6);
                assert!(
                    (mean - expect).abs() < 5.0 * se,
                    "cov[{a},{b}]: {mean} vs {expect} (se {se})"
                );
            }
        }
    }

    #[test]
    fn overflow_is_reported() {
        let spec = grid_spec(2, 3, vec![PriorKind::Icar]);
        let data = toy_data(&spec, 2);
        let mut state = zero_state(&spec);
        state.alpha[0] = 1000.0;
        assert!(matches!(
            log_posterior(&state, &spec, &data),
            Err(ModelError::NonFinitePredictor)
        ));
    }

    #[test]
    fn invalid_counts_rejected() {
        assert!(ArealCounts::new(
            DMatrix::from_element(2, 1, -1.0),
            DMatrix::from_element(2, 1, 1.0)
        )
        .is_err());
        assert!(ArealCounts::new(
            DMatrix::from_element(2, 1, 1.5),
            DMatrix::from_element(2, 1, 1.0)
        )
        .is_err());
        assert!(ArealCounts::new(
            DMatrix::from_element(2, 1, 1.0),
            DMatrix::from_element(2, 1, 0.0)
        )
        .is_err());
    }
}
