//! Adaptive random-walk Metropolis sampler for the M-model posterior.
//!
//! One iteration cycles through Metropolis blocks:
//!
//! 1. `(alpha, beta)` jointly (one multivariate proposal);
//! 2. `Phi` column by column, each column swept with single-site proposals
//!    and re-centered afterwards when its prior is ICAR;
//! 3. the Bartlett scalars jointly (diagonal proposed on the log scale);
//! 4. per-response PCAR/BYM2 hyperparameters on the logit scale;
//! 5. a scale move `(Phi, A) -> (Phi / a, a A)` that leaves `Theta` (and so
//!    the likelihood) invariant and samples the `Phi`-versus-`M` scale
//!    direction directly;
//! 6. per-response shear moves `(beta_j, Phi) -> (beta_j + d, Phi - d V_j)`
//!    with `V_j` chosen so the linear predictor is unchanged, which samples
//!    the confounding ridge between a coefficient and the smooth part of
//!    the field (plus the analogous intercept shear for proper priors).
//!
//! Step sizes adapt toward a target acceptance rate during burn-in only
//! (diminishing adaptation, frozen afterwards). Everything is driven by a
//! counter-keyed RNG, so runs are reproducible regardless of how chains are
//! scheduled.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::glm;
use crate::mmodel::{
    chi_log_density, m_from_sigma, sigma_from_bartlett, ArealCounts, BartlettFactor, MModelSpec,
    ModelError,
};
use crate::priors::{
    bym2_cov_eigenvalues, bym2_log_normalizer, icar_log_normalizer, pcar_log_normalizer,
    precision_matrix, PriorKind, BYM2_LAMBDA_MAX,
};
use crate::rng::{stream_rng, tag};
use crate::summary::{
    correlation_summary, dic, effective_sample_size, summarize_draws, waic, CorrelationSummary,
    ParamSummary, SummaryError,
};

#[derive(Debug, Error)]
pub enum McmcError {
    #[error("invalid MCMC configuration: {0}")]
    ConfigInvalid(String),
    #[error("log-posterior not finite at initialization")]
    NonFiniteTarget,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Summary(#[from] SummaryError),
}

/// Sampler settings. `n_iterations` counts post-burn-in iterations.
#[derive(Debug, Clone)]
pub struct McmcConfig {
    pub n_burnin: usize,
    pub n_iterations: usize,
    pub thin: usize,
    pub n_chains: usize,
    pub seed: u64,
    pub adapt_target: f64,
    pub step_min: f64,
    pub step_max: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            n_burnin: 5000,
            n_iterations: 20_000,
            thin: 10,
            n_chains: 3,
            seed: 1,
            adapt_target: 0.35,
            step_min: 1e-5,
            step_max: 20.0,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<(), McmcError> {
        if self.n_iterations == 0 {
            return Err(McmcError::ConfigInvalid("n_iterations must be > 0".into()));
        }
        if self.thin == 0 || self.thin > self.n_iterations {
            return Err(McmcError::ConfigInvalid(format!(
                "thin={} must be in [1, n_iterations]",
                self.thin
            )));
        }
        if self.n_chains == 0 {
            return Err(McmcError::ConfigInvalid("n_chains must be >= 1".into()));
        }
        if !(self.adapt_target > 0.0 && self.adapt_target < 1.0) {
            return Err(McmcError::ConfigInvalid(format!(
                "adapt_target={} must be in (0,1)",
                self.adapt_target
            )));
        }
        if !(self.step_min > 0.0 && self.step_min < self.step_max) {
            return Err(McmcError::ConfigInvalid(
                "need 0 < step_min < step_max".into(),
            ));
        }
        Ok(())
    }

    /// Retained draws per chain.
    pub fn draws_per_chain(&self) -> usize {
        self.n_iterations / self.thin
    }
}

/// Acceptance rate of one adapted block in one chain.
#[derive(Debug, Clone)]
pub struct BlockRate {
    pub chain: usize,
    pub block: String,
    pub rate: f64,
    pub step: f64,
}

/// Merged posterior draws with the per-draw quantities needed for the
/// information criteria and risk summaries.
#[derive(Debug, Clone)]
pub struct PosteriorSamples {
    pub n: usize,
    pub j: usize,
    pub n_chains: usize,
    pub param_names: Vec<String>,
    /// `draws[p][s]`: chains concatenated in chain order.
    pub draws: Vec<Vec<f64>>,
    /// `Sigma_b` per retained draw (empty for GLM-only fits).
    pub sigma_draws: Vec<DMatrix<f64>>,
    /// `log r` (n x J) per retained draw.
    pub log_risk_draws: Vec<DMatrix<f64>>,
    pub accept_rates: Vec<BlockRate>,
}

impl PosteriorSamples {
    pub fn n_draws(&self) -> usize {
        self.draws.first().map(|d| d.len()).unwrap_or(0)
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.param_names.iter().position(|p| p == name)
    }

    pub fn param_draws(&self, name: &str) -> Option<&[f64]> {
        self.param_index(name).map(|i| self.draws[i].as_slice())
    }

    /// Mean/SD/quantile table for every scalar parameter.
    pub fn summaries(&self) -> Result<Vec<ParamSummary>, SummaryError> {
        self.param_names
            .iter()
            .zip(&self.draws)
            .map(|(name, d)| summarize_draws(name, d))
            .collect()
    }

    pub fn correlation(&self) -> Result<Vec<CorrelationSummary>, SummaryError> {
        if self.j < 2 || self.sigma_draws.is_empty() {
            return Err(SummaryError::TooFewResponses);
        }
        correlation_summary(&self.sigma_draws)
    }

    /// Fitted means `mu = e * r` per draw.
    pub fn mu_draws(&self, data: &ArealCounts) -> Vec<DMatrix<f64>> {
        self.log_risk_draws
            .iter()
            .map(|lr| {
                DMatrix::from_fn(self.n, self.j, |r, c| data.e()[(r, c)] * lr[(r, c)].exp())
            })
            .collect()
    }

    pub fn dic(&self, data: &ArealCounts) -> Result<(f64, f64), SummaryError> {
        dic(data, &self.mu_draws(data))
    }

    pub fn waic(&self, data: &ArealCounts) -> Result<(f64, f64), SummaryError> {
        waic(data, &self.mu_draws(data))
    }

    /// Posterior mean of the relative risks.
    pub fn risk_posterior_mean(&self) -> DMatrix<f64> {
        let mut out = DMatrix::<f64>::zeros(self.n, self.j);
        for lr in &self.log_risk_draws {
            for c in 0..self.j {
                for r in 0..self.n {
                    out[(r, c)] += lr[(r, c)].exp();
                }
            }
        }
        out / self.log_risk_draws.len() as f64
    }

    /// Effective sample size per parameter, computed per chain and summed.
    pub fn effective_sample_sizes(&self) -> Vec<(String, f64)> {
        let per_chain = self.n_draws() / self.n_chains.max(1);
        self.param_names
            .iter()
            .zip(&self.draws)
            .map(|(name, d)| {
                let mut total = 0.0;
                for ch in 0..self.n_chains {
                    let lo = ch * per_chain;
                    let hi = (lo + per_chain).min(d.len());
                    total += effective_sample_size(&d[lo..hi]);
                }
                (name.clone(), total)
            })
            .collect()
    }
}

const ADAPT_BATCH: usize = 50;
const CACHE_REFRESH: usize = 500;

/// Scalar step size with batch adaptation toward a target acceptance rate.
#[derive(Debug, Clone)]
struct AdaptiveStep {
    log_step: f64,
    min: f64,
    max: f64,
    accepted: u64,
    proposed: u64,
    accepted_total: u64,
    proposed_total: u64,
}

impl AdaptiveStep {
    fn new(step: f64, min: f64, max: f64) -> Self {
        AdaptiveStep {
            log_step: step.ln(),
            min,
            max,
            accepted: 0,
            proposed: 0,
            accepted_total: 0,
            proposed_total: 0,
        }
    }

    fn step(&self) -> f64 {
        self.log_step.exp()
    }

    fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        self.proposed_total += 1;
        if accepted {
            self.accepted += 1;
            self.accepted_total += 1;
        }
    }

    fn adapt(&mut self, batch: usize, target: f64) {
        if self.proposed == 0 {
            return;
        }
        let rate = self.accepted as f64 / self.proposed as f64;
        let delta = (1.0 / (batch as f64).sqrt()).min(0.1);
        if rate > target {
            self.log_step += delta;
        } else {
            self.log_step -= delta;
        }
        self.log_step = self.log_step.clamp(self.min.ln(), self.max.ln());
        self.accepted = 0;
        self.proposed = 0;
    }

    /// Post-burn-in acceptance rate (counters reset at the end of burn-in).
    fn final_rate(&self) -> f64 {
        if self.proposed_total == 0 {
            return 0.0;
        }
        self.accepted_total as f64 / self.proposed_total as f64
    }

    fn reset_totals(&mut self) {
        self.accepted_total = 0;
        self.proposed_total = 0;
        self.accepted = 0;
        self.proposed = 0;
    }
}

fn accept(log_ratio: f64, rng: &mut ChaCha8Rng) -> bool {
    log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Hyperparameter-dependent prior pieces for one `Phi` column.
#[derive(Debug, Clone)]
struct ColumnPrior {
    kind: PriorKind,
    /// Dense precision of the column's field.
    omega: DMatrix<f64>,
    /// `0.5 log (pseudo)det - dim/2 log 2pi`.
    log_normalizer: f64,
}

/// One chain's mutable state plus every incremental cache.
struct Chain<'a> {
    spec: &'a MModelSpec,
    data: &'a ArealCounts,
    cfg: &'a McmcConfig,
    rng: ChaCha8Rng,

    alpha: DVector<f64>,
    beta: DVector<f64>,
    phi: DMatrix<f64>,
    bdiag: Vec<f64>,
    boffdiag: Vec<f64>,
    hyper: Vec<f64>,

    // Derived quantities.
    sigma: DMatrix<f64>,
    m: DMatrix<f64>,
    m_inv: DMatrix<f64>,
    /// Linear predictor without the offset: `eta = alpha + beta z + theta`.
    eta: DMatrix<f64>,
    mu: DMatrix<f64>,
    loglik: f64,
    columns: Vec<ColumnPrior>,
    /// `Omega_j Phi_j` per column.
    grad: Vec<DVector<f64>>,
    /// `Phi_j' Omega_j Phi_j` per column.
    quad: Vec<f64>,
    /// `Omega_l z_j` for the shear moves, indexed `[l][j]`.
    omega_z: Vec<Vec<DVector<f64>>>,
    /// `z_j' Omega_l z_j`, indexed `[l][j]`.
    zoz: Vec<Vec<f64>>,
    /// `Omega_l 1` and `1' Omega_l 1` for the intercept shear.
    omega_one: Vec<DVector<f64>>,
    one_o_one: Vec<f64>,

    /// Shear moves shift every `Phi` column along the shear vector, so they
    /// are only legal when that cannot break an ICAR sum-to-zero constraint.
    any_icar: bool,
    shear_ok: Vec<bool>,

    // Adaptive steps.
    step_fixed: AdaptiveStep,
    step_phi: Vec<AdaptiveStep>,
    step_bartlett: AdaptiveStep,
    step_hyper: Vec<AdaptiveStep>,
    step_scale: AdaptiveStep,
    step_shear: Vec<AdaptiveStep>,
    step_shear_alpha: Vec<AdaptiveStep>,
}

impl<'a> Chain<'a> {
    fn new(
        spec: &'a MModelSpec,
        data: &'a ArealCounts,
        cfg: &'a McmcConfig,
        chain_idx: usize,
    ) -> Result<Self, McmcError> {
        let (n, j) = (spec.n(), spec.j());
        let rng = stream_rng(cfg.seed, &[tag::CHAIN, chain_idx as u64]);

        // GLM starting values shorten burn-in; fall back to zero when the
        // design is degenerate.
        let mut alpha = DVector::zeros(j);
        let mut beta = DVector::zeros(j);
        for c in 0..j {
            if let Ok(fit) = glm::fit_poisson_glm(
                &data.y().column(c).clone_owned(),
                &data.e().column(c).clone_owned(),
                &spec.designs[c],
            ) {
                alpha[c] = fit.alpha;
                beta[c] = fit.beta;
            }
        }

        // Moment-matched Bartlett start: with sigma^2 large, the nominal
        // chi-scale start would put Sigma_b orders of magnitude above any
        // plausible field variance and the sampler would crawl down the
        // (Phi, M) scale ridge; start instead at a crude data-based scale.
        let mut bdiag = vec![1.0; j];
        for c in 0..j {
            let mut vals = Vec::with_capacity(n);
            for r in 0..n {
                vals.push(((data.y()[(r, c)] + 0.5) / data.e()[(r, c)]).ln());
            }
            let sd = crate::util::sample_sd(&vals);
            let var = (sd * sd).max(0.01);
            bdiag[c] = (var / spec.wishart_scale_sigma2).sqrt();
        }
        let boffdiag = vec![0.0; j * (j - 1) / 2];
        let hyper = vec![0.5; j];

        let any_icar = spec.priors.iter().any(|p| *p == PriorKind::Icar);
        let shear_ok: Vec<bool> = (0..j)
            .map(|c| {
                if !any_icar {
                    return true;
                }
                let z = &spec.designs[c];
                let scale = z.abs().max().max(1.0);
                (z.sum() / n as f64).abs() < 1e-10 * scale
            })
            .collect();

        let sm = cfg.step_min;
        let sx = cfg.step_max;
        let mut chain = Chain {
            spec,
            data,
            cfg,
            rng,
            alpha,
            beta,
            phi: DMatrix::zeros(n, j),
            bdiag,
            boffdiag,
            hyper,
            sigma: DMatrix::identity(j, j),
            m: DMatrix::identity(j, j),
            m_inv: DMatrix::identity(j, j),
            eta: DMatrix::zeros(n, j),
            mu: DMatrix::zeros(n, j),
            loglik: 0.0,
            columns: Vec::new(),
            grad: vec![DVector::zeros(n); j],
            quad: vec![0.0; j],
            omega_z: Vec::new(),
            zoz: Vec::new(),
            omega_one: Vec::new(),
            one_o_one: Vec::new(),
            any_icar,
            shear_ok,
            step_fixed: AdaptiveStep::new(0.05, sm, sx),
            step_phi: (0..j).map(|_| AdaptiveStep::new(0.2, sm, sx)).collect(),
            step_bartlett: AdaptiveStep::new(0.1, sm, sx),
            step_hyper: (0..j).map(|_| AdaptiveStep::new(0.5, sm, sx)).collect(),
            step_scale: AdaptiveStep::new(0.1, sm, sx),
            step_shear: (0..j).map(|_| AdaptiveStep::new(0.05, sm, sx)).collect(),
            step_shear_alpha: (0..j).map(|_| AdaptiveStep::new(0.05, sm, sx)).collect(),
        };
        chain.rebuild_mixing()?;
        chain.rebuild_columns()?;
        chain.refresh_caches()?;
        if !chain.loglik.is_finite() {
            return Err(McmcError::NonFiniteTarget);
        }
        Ok(chain)
    }

    fn j(&self) -> usize {
        self.spec.j()
    }

    fn n(&self) -> usize {
        self.spec.n()
    }

    /// Rebuild `Sigma_b`, `M`, `M^{-1}` from the Bartlett scalars.
    fn rebuild_mixing(&mut self) -> Result<(), McmcError> {
        let b = BartlettFactor {
            diag: self.bdiag.clone(),
            offdiag: self.boffdiag.clone(),
        };
        self.sigma = sigma_from_bartlett(&b, self.spec.wishart_scale_sigma2)?;
        self.m = m_from_sigma(&self.sigma)?;
        self.m_inv = self
            .m
            .clone()
            .try_inverse()
            .ok_or(ModelError::SingularM)?;
        Ok(())
    }

    /// Rebuild the per-column precision matrices and normalizers after a
    /// hyperparameter change.
    fn rebuild_columns(&mut self) -> Result<(), McmcError> {
        let s = &self.spec.structure;
        let mut columns = Vec::with_capacity(self.j());
        for c in 0..self.j() {
            let kind = self.spec.priors[c];
            let hyper = self.hyper[c];
            let prior = kind.with_hyper(hyper);
            let omega = precision_matrix(&prior, s).map_err(ModelError::Prior)?;
            let log_normalizer = match kind {
                PriorKind::Icar => icar_log_normalizer(s),
                PriorKind::Pcar => pcar_log_normalizer(hyper, s),
                PriorKind::Bym2 => bym2_log_normalizer(hyper, s),
            };
            columns.push(ColumnPrior {
                kind,
                omega,
                log_normalizer,
            });
        }
        self.columns = columns;
        self.rebuild_shear_vectors();
        Ok(())
    }

    fn rebuild_shear_vectors(&mut self) {
        let j = self.j();
        let n = self.n();
        let ones = DVector::from_element(n, 1.0);
        self.omega_z = (0..j)
            .map(|l| {
                (0..j)
                    .map(|zj| &self.columns[l].omega * &self.spec.designs[zj])
                    .collect()
            })
            .collect();
        self.zoz = (0..j)
            .map(|l| {
                (0..j)
                    .map(|zj| self.spec.designs[zj].dot(&self.omega_z[l][zj]))
                    .collect()
            })
            .collect();
        self.omega_one = (0..j)
            .map(|l| &self.columns[l].omega * &ones)
            .collect();
        self.one_o_one = (0..j).map(|l| ones.dot(&self.omega_one[l])).collect();
    }

    /// Recompute `eta`, `mu`, the likelihood and the `Phi` prior caches from
    /// the current state.
    fn refresh_caches(&mut self) -> Result<(), McmcError> {
        let (n, j) = (self.n(), self.j());
        let theta = if self.spec.include_spatial {
            Some(&self.phi * &self.m)
        } else {
            None
        };
        let mut loglik = 0.0;
        for c in 0..j {
            let z = &self.spec.designs[c];
            for r in 0..n {
                let mut eta = self.alpha[c] + self.beta[c] * z[r];
                if let Some(t) = &theta {
                    eta += t[(r, c)];
                }
                let mu = self.data.e()[(r, c)] * eta.exp();
                if !mu.is_finite() {
                    return Err(McmcError::NonFiniteTarget);
                }
                self.eta[(r, c)] = eta;
                self.mu[(r, c)] = mu;
                loglik += self.data.y()[(r, c)] * (self.data.log_e()[(r, c)] + eta) - mu;
            }
        }
        self.loglik = loglik;
        if self.spec.include_spatial {
            for c in 0..j {
                let col = self.phi.column(c).clone_owned();
                self.grad[c] = &self.columns[c].omega * &col;
                self.quad[c] = col.dot(&self.grad[c]);
            }
        }
        Ok(())
    }

    /// log prior of one `Phi` column given its cached quadratic form.
    fn phi_log_prior(&self, c: usize) -> f64 {
        self.columns[c].log_normalizer - 0.5 * self.quad[c]
    }

    // ---- Block 1: joint (alpha, beta) update. ------------------------------

    fn update_fixed(&mut self) {
        let j = self.j();
        let step = self.step_fixed.step();
        let mut alpha_new = self.alpha.clone();
        let mut beta_new = self.beta.clone();
        for c in 0..j {
            let za: f64 = StandardNormal.sample(&mut self.rng);
            let zb: f64 = StandardNormal.sample(&mut self.rng);
            alpha_new[c] += step * za;
            beta_new[c] += step * zb;
        }
        // Likelihood delta with eta shifted by da + db z per column.
        let mut new_loglik = 0.0;
        let mut finite = true;
        let mut eta_new = self.eta.clone();
        'outer: for c in 0..j {
            let da = alpha_new[c] - self.alpha[c];
            let db = beta_new[c] - self.beta[c];
            let z = &self.spec.designs[c];
            for r in 0..self.n() {
                let eta = self.eta[(r, c)] + da + db * z[r];
                let mu = self.data.e()[(r, c)] * eta.exp();
                if !mu.is_finite() {
                    finite = false;
                    break 'outer;
                }
                eta_new[(r, c)] = eta;
                new_loglik += self.data.y()[(r, c)] * (self.data.log_e()[(r, c)] + eta) - mu;
            }
        }
        let accepted = if finite {
            let prec = self.spec.fixed_effect_precision;
            let mut dprior = 0.0;
            for c in 0..j {
                dprior += -0.5
                    * prec
                    * (alpha_new[c] * alpha_new[c] - self.alpha[c] * self.alpha[c]
                        + beta_new[c] * beta_new[c]
                        - self.beta[c] * self.beta[c]);
            }
            accept(new_loglik - self.loglik + dprior, &mut self.rng)
        } else {
            false
        };
        if accepted {
            self.alpha = alpha_new;
            self.beta = beta_new;
            self.eta = eta_new;
            for c in 0..j {
                for r in 0..self.n() {
                    self.mu[(r, c)] = self.data.e()[(r, c)] * self.eta[(r, c)].exp();
                }
            }
            self.loglik = new_loglik;
        }
        self.step_fixed.record(accepted);
    }

    // ---- Block 2: single-site sweeps over one Phi column. ------------------

    fn update_phi_column(&mut self, col: usize) {
        let n = self.n();
        let j = self.j();
        let step = self.step_phi[col].step();
        for i in 0..n {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            let delta = step * z;
            // Likelihood: row i of Theta moves by delta * M[col, c].
            let mut dlog = 0.0;
            let mut finite = true;
            for c in 0..j {
                let t = delta * self.m[(col, c)];
                let grow = t.exp();
                if !grow.is_finite() {
                    finite = false;
                    break;
                }
                dlog += self.data.y()[(i, c)] * t - self.mu[(i, c)] * (grow - 1.0);
            }
            if !finite {
                self.step_phi[col].record(false);
                continue;
            }
            // Prior: quadratic form delta.
            let omega_ii = self.columns[col].omega[(i, i)];
            let dquad = 2.0 * delta * self.grad[col][i] + delta * delta * omega_ii;
            let accepted = accept(dlog - 0.5 * dquad, &mut self.rng);
            if accepted {
                self.phi[(i, col)] += delta;
                for c in 0..j {
                    let t = delta * self.m[(col, c)];
                    self.eta[(i, c)] += t;
                    self.mu[(i, c)] *= t.exp();
                }
                self.loglik += dlog;
                self.quad[col] += dquad;
                let omega_col = self.columns[col].omega.column(i);
                self.grad[col].axpy(delta, &omega_col.clone_owned(), 1.0);
            }
            self.step_phi[col].record(accepted);
        }
        // Sum-to-zero projection for intrinsic columns. The Q-quadratic form
        // and gradient are invariant (Q 1 = 0); the likelihood is not, so
        // refresh eta/mu/loglik for the shifted rows.
        if self.columns[col].kind == PriorKind::Icar {
            let mean = self.phi.column(col).sum() / n as f64;
            if mean != 0.0 {
                for r in 0..n {
                    self.phi[(r, col)] -= mean;
                }
                let mut loglik = 0.0;
                for c in 0..j {
                    let shift = -mean * self.m[(col, c)];
                    for r in 0..n {
                        self.eta[(r, c)] += shift;
                        self.mu[(r, c)] = self.data.e()[(r, c)] * self.eta[(r, c)].exp();
                    }
                }
                for c in 0..j {
                    for r in 0..n {
                        loglik += self.data.y()[(r, c)]
                            * (self.data.log_e()[(r, c)] + self.eta[(r, c)])
                            - self.mu[(r, c)];
                    }
                }
                self.loglik = loglik;
            }
        }
    }

    // ---- Block 3: Bartlett scalars. ----------------------------------------

    fn update_bartlett(&mut self) {
        let step = self.step_bartlett.step();
        let nu = self.spec.wishart_dof as f64;
        let mut new_diag = self.bdiag.clone();
        let mut new_off = self.boffdiag.clone();
        let mut log_proposal_corr = 0.0;
        for d in new_diag.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            let old = *d;
            *d = old * (step * z).exp();
            // Multiplicative proposal: q-ratio contributes log(c'/c).
            log_proposal_corr += (*d / old).ln();
        }
        for x in new_off.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            *x += step * z;
        }

        let b = BartlettFactor {
            diag: new_diag.clone(),
            offdiag: new_off.clone(),
        };
        let (sigma_new, m_new) = match sigma_from_bartlett(&b, self.spec.wishart_scale_sigma2)
            .and_then(|s| m_from_sigma(&s).map(|m| (s, m)))
        {
            Ok(v) => v,
            Err(_) => {
                self.step_bartlett.record(false);
                return;
            }
        };
        let theta_new = &self.phi * &m_new;
        let mut new_loglik = 0.0;
        let mut finite = true;
        't: for c in 0..self.j() {
            let z = &self.spec.designs[c];
            for r in 0..self.n() {
                let eta = self.alpha[c] + self.beta[c] * z[r] + theta_new[(r, c)];
                let mu = self.data.e()[(r, c)] * eta.exp();
                if !mu.is_finite() {
                    finite = false;
                    break 't;
                }
                new_loglik += self.data.y()[(r, c)] * (self.data.log_e()[(r, c)] + eta) - mu;
            }
        }
        let mut dprior = 0.0;
        if finite {
            for (idx, (&c_new, &c_old)) in new_diag.iter().zip(&self.bdiag).enumerate() {
                dprior +=
                    chi_log_density(c_new, nu - idx as f64) - chi_log_density(c_old, nu - idx as f64);
            }
            for (&x_new, &x_old) in new_off.iter().zip(&self.boffdiag) {
                dprior += -0.5 * (x_new * x_new - x_old * x_old);
            }
        }
        let accepted = finite
            && accept(
                new_loglik - self.loglik + dprior + log_proposal_corr,
                &mut self.rng,
            );
        if accepted {
            self.bdiag = new_diag;
            self.boffdiag = new_off;
            self.sigma = sigma_new;
            self.m_inv = m_new.clone().try_inverse().unwrap_or_else(|| {
                // Fall back to the pseudo-identity; rebuild on next refresh.
                DMatrix::identity(self.j(), self.j())
            });
            self.m = m_new;
            for c in 0..self.j() {
                let z = &self.spec.designs[c];
                for r in 0..self.n() {
                    let eta = self.alpha[c] + self.beta[c] * z[r] + theta_new[(r, c)];
                    self.eta[(r, c)] = eta;
                    self.mu[(r, c)] = self.data.e()[(r, c)] * eta.exp();
                }
            }
            self.loglik = new_loglik;
        }
        self.step_bartlett.record(accepted);
    }

    // ---- Block 4: PCAR/BYM2 hyperparameters. --------------------------------

    fn update_hyper(&mut self, col: usize) {
        let kind = self.columns[col].kind;
        if !kind.has_hyper() {
            return;
        }
        let step = self.step_hyper[col].step();
        let z: f64 = StandardNormal.sample(&mut self.rng);
        let old = self.hyper[col];
        let new = sigmoid(logit(old) + step * z);
        if kind == PriorKind::Bym2 && new > BYM2_LAMBDA_MAX {
            self.step_hyper[col].record(false);
            return;
        }
        if !(new > 0.0 && new < 1.0) {
            self.step_hyper[col].record(false);
            return;
        }
        let s = &self.spec.structure;
        let phi_col = self.phi.column(col).clone_owned();
        let (new_normalizer, new_quad) = match kind {
            PriorKind::Pcar => (
                pcar_log_normalizer(new, s),
                crate::priors::pcar_quad_form(&phi_col, new, s),
            ),
            PriorKind::Bym2 => {
                let coefs = s.basis().vectors().transpose() * &phi_col;
                let gammas = bym2_cov_eigenvalues(new, s);
                let mut quad = 0.0;
                for c in 0..s.n() {
                    quad += coefs[c] * coefs[c] / gammas[c];
                }
                (bym2_log_normalizer(new, s), quad)
            }
            PriorKind::Icar => unreachable!(),
        };
        let dlog = (new_normalizer - 0.5 * new_quad) - self.phi_log_prior(col);
        // Logit proposal correction: + log[h'(1-h')] - log[h(1-h)].
        let corr = (new * (1.0 - new)).ln() - (old * (1.0 - old)).ln();
        let accepted = accept(dlog + corr, &mut self.rng);
        if accepted {
            self.hyper[col] = new;
            let prior = kind.with_hyper(new);
            let omega = precision_matrix(&prior, s).expect("validated hyper");
            self.columns[col] = ColumnPrior {
                kind,
                omega,
                log_normalizer: new_normalizer,
            };
            self.grad[col] = &self.columns[col].omega * &phi_col;
            self.quad[col] = new_quad;
            self.rebuild_shear_vectors();
        }
        self.step_hyper[col].record(accepted);
    }

    // ---- Block 5: likelihood-invariant scale move. ---------------------------

    fn update_scale(&mut self) {
        let j = self.j();
        let step = self.step_scale.step();
        let z: f64 = StandardNormal.sample(&mut self.rng);
        let log_a = step * z;
        let a = log_a.exp();
        let nu = self.spec.wishart_dof as f64;

        // Prior deltas under (Phi, A) -> (Phi/a, aA); Theta is unchanged.
        let mut dlog = 0.0;
        for c in 0..j {
            let new_quad = self.quad[c] / (a * a);
            dlog += -0.5 * (new_quad - self.quad[c]);
        }
        for (idx, &c) in self.bdiag.iter().enumerate() {
            dlog += chi_log_density(c * a, nu - idx as f64) - chi_log_density(c, nu - idx as f64);
        }
        for &x in &self.boffdiag {
            dlog += -0.5 * ((x * a) * (x * a) - x * x);
        }
        // Jacobian: a^{J + J(J-1)/2 - nJ}.
        let exponent = j as f64 + (j * (j - 1) / 2) as f64 - (self.n() * j) as f64;
        dlog += exponent * log_a;

        let accepted = accept(dlog, &mut self.rng);
        if accepted {
            self.phi /= a;
            for g in &mut self.grad {
                *g /= a;
            }
            for q in &mut self.quad {
                *q /= a * a;
            }
            for c in &mut self.bdiag {
                *c *= a;
            }
            for x in &mut self.boffdiag {
                *x *= a;
            }
            self.sigma *= a * a;
            self.m *= a;
            self.m_inv /= a;
        }
        self.step_scale.record(accepted);
    }

    // ---- Block 6: confounding shear moves. -----------------------------------

    /// Shift `beta_j` (or `alpha_j` with the ones vector) and compensate in
    /// `Phi` so the linear predictor is untouched; the priors arbitrate.
    fn update_shear(&mut self, col: usize, intercept: bool) {
        let j = self.j();
        let step = if intercept {
            self.step_shear_alpha[col].step()
        } else {
            self.step_shear[col].step()
        };
        let z: f64 = StandardNormal.sample(&mut self.rng);
        let delta = step * z;

        // gamma_l = -delta * M^{-1}[col, l].
        let mut dlog = 0.0;
        let mut gammas = vec![0.0; j];
        for l in 0..j {
            let gamma = -delta * self.m_inv[(col, l)];
            gammas[l] = gamma;
            let (vg, vov) = if intercept {
                (self.omega_one[l].dot(&self.phi.column(l)), self.one_o_one[l])
            } else {
                (
                    self.omega_z[l][col].dot(&self.phi.column(l)),
                    self.zoz[l][col],
                )
            };
            let dquad = 2.0 * gamma * vg + gamma * gamma * vov;
            dlog += -0.5 * dquad;
        }
        let prec = self.spec.fixed_effect_precision;
        let old = if intercept {
            self.alpha[col]
        } else {
            self.beta[col]
        };
        dlog += -0.5 * prec * ((old + delta) * (old + delta) - old * old);

        let accepted = accept(dlog, &mut self.rng);
        if accepted {
            if intercept {
                self.alpha[col] += delta;
            } else {
                self.beta[col] += delta;
            }
            for l in 0..j {
                let gamma = gammas[l];
                if gamma == 0.0 {
                    continue;
                }
                let v = if intercept {
                    DVector::from_element(self.n(), 1.0)
                } else {
                    self.spec.designs[col].clone()
                };
                let (vg, vov, ov) = if intercept {
                    (
                        self.omega_one[l].dot(&self.phi.column(l)),
                        self.one_o_one[l],
                        self.omega_one[l].clone(),
                    )
                } else {
                    (
                        self.omega_z[l][col].dot(&self.phi.column(l)),
                        self.zoz[l][col],
                        self.omega_z[l][col].clone(),
                    )
                };
                self.quad[l] += 2.0 * gamma * vg + gamma * gamma * vov;
                self.grad[l].axpy(gamma, &ov, 1.0);
                let mut phi_col = self.phi.column_mut(l);
                phi_col.axpy(gamma, &v, 1.0);
            }
        }
        if intercept {
            self.step_shear_alpha[col].record(accepted);
        } else {
            self.step_shear[col].record(accepted);
        }
    }

    fn adapt_all(&mut self, batch: usize) {
        let t = self.cfg.adapt_target;
        self.step_fixed.adapt(batch, t);
        for s in &mut self.step_phi {
            s.adapt(batch, t);
        }
        self.step_bartlett.adapt(batch, t);
        for s in &mut self.step_hyper {
            s.adapt(batch, t);
        }
        self.step_scale.adapt(batch, t);
        for s in &mut self.step_shear {
            s.adapt(batch, t);
        }
        for s in &mut self.step_shear_alpha {
            s.adapt(batch, t);
        }
    }

    fn reset_accept_totals(&mut self) {
        self.step_fixed.reset_totals();
        for s in &mut self.step_phi {
            s.reset_totals();
        }
        self.step_bartlett.reset_totals();
        for s in &mut self.step_hyper {
            s.reset_totals();
        }
        self.step_scale.reset_totals();
        for s in &mut self.step_shear {
            s.reset_totals();
        }
        for s in &mut self.step_shear_alpha {
            s.reset_totals();
        }
    }

    fn iterate(&mut self) {
        self.update_fixed();
        if self.spec.include_spatial {
            for c in 0..self.j() {
                self.update_phi_column(c);
            }
            self.update_bartlett();
            for c in 0..self.j() {
                self.update_hyper(c);
            }
            self.update_scale();
            for c in 0..self.j() {
                if self.shear_ok[c] {
                    self.update_shear(c, false);
                }
                if !self.any_icar {
                    self.update_shear(c, true);
                }
            }
        }
    }

    fn block_rates(&self, chain: usize) -> Vec<BlockRate> {
        let mut out = vec![BlockRate {
            chain,
            block: "fixed".into(),
            rate: self.step_fixed.final_rate(),
            step: self.step_fixed.step(),
        }];
        if self.spec.include_spatial {
            for (c, s) in self.step_phi.iter().enumerate() {
                out.push(BlockRate {
                    chain,
                    block: format!("phi[{}]", c + 1),
                    rate: s.final_rate(),
                    step: s.step(),
                });
            }
            out.push(BlockRate {
                chain,
                block: "bartlett".into(),
                rate: self.step_bartlett.final_rate(),
                step: self.step_bartlett.step(),
            });
            for (c, s) in self.step_hyper.iter().enumerate() {
                if self.spec.priors[c].has_hyper() {
                    out.push(BlockRate {
                        chain,
                        block: format!("hyper[{}]", c + 1),
                        rate: s.final_rate(),
                        step: s.step(),
                    });
                }
            }
            out.push(BlockRate {
                chain,
                block: "scale".into(),
                rate: self.step_scale.final_rate(),
                step: self.step_scale.step(),
            });
            for (c, s) in self.step_shear.iter().enumerate() {
                out.push(BlockRate {
                    chain,
                    block: format!("shear[{}]", c + 1),
                    rate: s.final_rate(),
                    step: s.step(),
                });
            }
        }
        out
    }

    /// Current state as a latent-state value (for posterior checks in tests).
    #[cfg(test)]
    fn latent_state(&self) -> crate::mmodel::LatentState {
        crate::mmodel::LatentState {
            alpha: self.alpha.clone(),
            beta: self.beta.clone(),
            phi: self.phi.clone(),
            bartlett: BartlettFactor {
                diag: self.bdiag.clone(),
                offdiag: self.boffdiag.clone(),
            },
            hyper: self.hyper.clone(),
        }
    }
}

/// Parameter name schema for a model spec.
fn param_names(spec: &MModelSpec) -> Vec<String> {
    let j = spec.j();
    let mut names = Vec::new();
    for c in 0..j {
        names.push(format!("alpha[{}]", c + 1));
    }
    for c in 0..j {
        names.push(format!("beta[{}]", c + 1));
    }
    if spec.include_spatial {
        for c in 0..j {
            if let Some(h) = spec.priors[c].hyper_name() {
                names.push(format!("{}[{}]", h, c + 1));
            }
        }
        for a in 0..j {
            for b in a..j {
                names.push(format!("Sigma_b[{}:{}]", a + 1, b + 1));
            }
        }
        for a in 0..j {
            for b in (a + 1)..j {
                names.push(format!("cor[{}:{}]", a + 1, b + 1));
            }
        }
    }
    names
}

struct ChainOutput {
    draws: Vec<Vec<f64>>,
    sigma_draws: Vec<DMatrix<f64>>,
    log_risk_draws: Vec<DMatrix<f64>>,
    rates: Vec<BlockRate>,
}

fn run_chain(
    spec: &MModelSpec,
    data: &ArealCounts,
    cfg: &McmcConfig,
    chain_idx: usize,
    n_params: usize,
) -> Result<ChainOutput, McmcError> {
    let mut chain = Chain::new(spec, data, cfg, chain_idx)?;
    let per_chain = cfg.draws_per_chain();
    let mut draws = vec![Vec::with_capacity(per_chain); n_params];
    let mut sigma_draws = Vec::with_capacity(if spec.j() >= 1 { per_chain } else { 0 });
    let mut log_risk_draws = Vec::with_capacity(per_chain);

    let total = cfg.n_burnin + cfg.n_iterations;
    for iter in 0..total {
        chain.iterate();
        let adapting = iter < cfg.n_burnin;
        if adapting && (iter + 1) % ADAPT_BATCH == 0 {
            chain.adapt_all((iter + 1) / ADAPT_BATCH);
        }
        if iter + 1 == cfg.n_burnin {
            chain.reset_accept_totals();
        }
        if (iter + 1) % CACHE_REFRESH == 0 {
            chain.refresh_caches()?;
        }
        if iter >= cfg.n_burnin && (iter - cfg.n_burnin + 1) % cfg.thin == 0 {
            let mut p = 0;
            for c in 0..spec.j() {
                draws[p].push(chain.alpha[c]);
                p += 1;
            }
            for c in 0..spec.j() {
                draws[p].push(chain.beta[c]);
                p += 1;
            }
            if spec.include_spatial {
                for c in 0..spec.j() {
                    if spec.priors[c].has_hyper() {
                        draws[p].push(chain.hyper[c]);
                        p += 1;
                    }
                }
                for a in 0..spec.j() {
                    for b in a..spec.j() {
                        draws[p].push(chain.sigma[(a, b)]);
                        p += 1;
                    }
                }
                for a in 0..spec.j() {
                    for b in (a + 1)..spec.j() {
                        let r = chain.sigma[(a, b)]
                            / (chain.sigma[(a, a)] * chain.sigma[(b, b)]).sqrt();
                        draws[p].push(r);
                        p += 1;
                    }
                }
                sigma_draws.push(chain.sigma.clone());
            }
            debug_assert_eq!(p, n_params);
            log_risk_draws.push(chain.eta.clone());
        }
    }
    Ok(ChainOutput {
        draws,
        sigma_draws,
        log_risk_draws,
        rates: chain.block_rates(chain_idx),
    })
}

/// Sample the posterior. Chains run independently (in parallel when rayon
/// has threads available) and are merged in chain order, so the result is
/// deterministic for a given seed.
pub fn fit_mcmc(
    spec: &MModelSpec,
    data: &ArealCounts,
    cfg: &McmcConfig,
) -> Result<PosteriorSamples, McmcError> {
    cfg.validate()?;
    if data.n() != spec.n() || data.j() != spec.j() {
        return Err(McmcError::Model(ModelError::DimensionMismatch(format!(
            "data {}x{} vs model {}x{}",
            data.n(),
            data.j(),
            spec.n(),
            spec.j()
        ))));
    }
    let names = param_names(spec);
    let n_params = names.len();
    let outputs: Result<Vec<ChainOutput>, McmcError> = (0..cfg.n_chains)
        .into_par_iter()
        .map(|c| run_chain(spec, data, cfg, c, n_params))
        .collect();
    let outputs = outputs?;

    let mut draws = vec![Vec::with_capacity(cfg.draws_per_chain() * cfg.n_chains); n_params];
    let mut sigma_draws = Vec::new();
    let mut log_risk_draws = Vec::new();
    let mut accept_rates = Vec::new();
    for out in outputs {
        for (p, d) in out.draws.into_iter().enumerate() {
            draws[p].extend(d);
        }
        sigma_draws.extend(out.sigma_draws);
        log_risk_draws.extend(out.log_risk_draws);
        accept_rates.extend(out.rates);
    }
    Ok(PosteriorSamples {
        n: spec.n(),
        j: spec.j(),
        n_chains: cfg.n_chains,
        param_names: names,
        draws,
        sigma_draws,
        log_risk_draws,
        accept_rates,
    })
}

/// Sampler self-check: run the same adaptive scalar kernel on a conjugate
/// normal-normal posterior, for which the exact mean and variance are known.
/// Returns the retained draws.
pub fn sample_gaussian_reference(
    prior_mean: f64,
    prior_var: f64,
    obs: f64,
    obs_var: f64,
    cfg: &McmcConfig,
) -> Result<Vec<f64>, McmcError> {
    cfg.validate()?;
    let log_target = |x: f64| {
        -0.5 * (x - prior_mean) * (x - prior_mean) / prior_var
            - 0.5 * (x - obs) * (x - obs) / obs_var
    };
    let mut rng = stream_rng(cfg.seed, &[tag::CHAIN, 0]);
    let mut step = AdaptiveStep::new(1.0, cfg.step_min, cfg.step_max);
    let mut x = prior_mean;
    let mut lp = log_target(x);
    let mut out = Vec::with_capacity(cfg.draws_per_chain());
    for iter in 0..cfg.n_burnin + cfg.n_iterations {
        let z: f64 = StandardNormal.sample(&mut rng);
        let prop = x + step.step() * z;
        let lp_prop = log_target(prop);
        let accepted = accept(lp_prop - lp, &mut rng);
        if accepted {
            x = prop;
            lp = lp_prop;
        }
        step.record(accepted);
        if iter < cfg.n_burnin && (iter + 1) % ADAPT_BATCH == 0 {
            step.adapt((iter + 1) / ADAPT_BATCH, cfg.adapt_target);
        }
        if iter >= cfg.n_burnin && (iter - cfg.n_burnin + 1) % cfg.thin == 0 {
            out.push(x);
        }
    }
    Ok(out)
}
