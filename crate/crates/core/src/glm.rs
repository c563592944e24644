//! Poisson GLM baseline fitted by iteratively reweighted least squares.
//!
//! The comparator model without spatial random effects: per response,
//! `log mu_i = log e_i + alpha + beta z_i`. Also supplies starting values
//! for the MCMC chains.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GlmError {
    #[error("IRLS did not converge after {0} iterations")]
    NonConvergence(usize),
    #[error("design is rank deficient (covariate collinear with intercept)")]
    RankDeficient,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Point estimates and asymptotic standard errors for one response.
#[derive(Debug, Clone, Copy)]
pub struct GlmFit {
    pub alpha: f64,
    pub beta: f64,
    pub se_alpha: f64,
    pub se_beta: f64,
    pub iterations: usize,
}

const MAX_ITER: usize = 50;
const TOL: f64 = 1e-10;

/// Fit `y_i ~ Poisson(e_i exp(alpha + beta z_i))` by IRLS.
pub fn fit_poisson_glm(
    y: &DVector<f64>,
    e: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<GlmFit, GlmError> {
    let n = y.len();
    if e.len() != n || z.len() != n {
        return Err(GlmError::DimensionMismatch(format!(
            "y={} e={} z={}",
            n,
            e.len(),
            z.len()
        )));
    }
    let mut alpha = 0.0f64;
    let mut beta = 0.0f64;
    for iter in 1..=MAX_ITER {
        // Weighted normal equations for the 2-column design [1, z].
        let mut s_w = 0.0;
        let mut s_wz = 0.0;
        let mut s_wzz = 0.0;
        let mut s_wr = 0.0;
        let mut s_wzr = 0.0;
        for i in 0..n {
            let eta = alpha + beta * z[i];
            let mu = e[i] * eta.exp();
            let w = mu;
            // Working response minus offset: eta + (y - mu)/mu.
            let r = eta + (y[i] - mu) / mu;
            s_w += w;
            s_wz += w * z[i];
            s_wzz += w * z[i] * z[i];
            s_wr += w * r;
            s_wzr += w * z[i] * r;
        }
        let det = s_w * s_wzz - s_wz * s_wz;
        if det.abs() < 1e-10 * s_w * s_wzz.max(1e-300) || !det.is_finite() {
            return Err(GlmError::RankDeficient);
        }
        let new_alpha = (s_wzz * s_wr - s_wz * s_wzr) / det;
        let new_beta = (s_w * s_wzr - s_wz * s_wr) / det;
        let step = (new_alpha - alpha).abs().max((new_beta - beta).abs());
        alpha = new_alpha;
        beta = new_beta;
        if step < TOL {
            // Asymptotic covariance is the inverse of the weighted Gram matrix.
            let se_alpha = (s_wzz / det).sqrt();
            let se_beta = (s_w / det).sqrt();
            return Ok(GlmFit {
                alpha,
                beta,
                se_alpha,
                se_beta,
                iterations: iter,
            });
        }
    }
    Err(GlmError::NonConvergence(MAX_ITER))
}

/// Per-response GLM fits for an `n x J` count matrix with per-response
/// designs.
pub fn fit_glm_baseline(
    y: &DMatrix<f64>,
    e: &DMatrix<f64>,
    designs: &[DVector<f64>],
) -> Result<Vec<GlmFit>, GlmError> {
    if designs.len() != y.ncols() {
        return Err(GlmError::DimensionMismatch(format!(
            "{} designs for {} responses",
            designs.len(),
            y.ncols()
        )));
    }
    (0..y.ncols())
        .map(|c| {
            fit_poisson_glm(
                &y.column(c).clone_owned(),
                &e.column(c).clone_owned(),
                &designs[c],
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Poisson};

    #[test]
    fn saturated_null_gives_zero_coefficients() {
        let e = DVector::from_vec(vec![10.0, 20.0, 30.0, 15.0]);
        let y = e.clone();
        let z = DVector::from_vec(vec![-1.0, 0.0, 1.0, 2.0]);
        let fit = fit_poisson_glm(&y, &e, &z).unwrap();
        assert!(fit.alpha.abs() < 1e-9, "alpha {}", fit.alpha);
        assert!(fit.beta.abs() < 1e-9, "beta {}", fit.beta);
    }

    #[test]
    fn recovers_simulated_coefficients() {
        let n = 400;
        let mut rng = crate::rng::stream_rng(42, &[1]);
        let z = DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let alpha_true = 0.12;
        let beta_true = 0.15;
        let e = DVector::from_fn(n, |_, _| 200.0 + 300.0 * rng.random::<f64>());
        let y = DVector::from_fn(n, |i, _| {
            let mu = e[i] * (alpha_true + beta_true * z[i]).exp();
            Poisson::new(mu).unwrap().sample(&mut rng)
        });
        let fit = fit_poisson_glm(&y, &e, &z).unwrap();
        assert!(
            (fit.alpha - alpha_true).abs() < 3.0 * fit.se_alpha,
            "alpha {} se {}",
            fit.alpha,
            fit.se_alpha
        );
        assert!(
            (fit.beta - beta_true).abs() < 3.0 * fit.se_beta,
            "beta {} se {}",
            fit.beta,
            fit.se_beta
        );
    }

    #[test]
    fn constant_covariate_is_rank_deficient() {
        let e = DVector::from_vec(vec![10.0, 20.0, 30.0]);
        let y = DVector::from_vec(vec![12.0, 18.0, 33.0]);
        let z = DVector::from_vec(vec![2.0, 2.0, 2.0]);
        assert_eq!(
            fit_poisson_glm(&y, &e, &z).unwrap_err(),
            GlmError::RankDeficient
        );
    }
}
