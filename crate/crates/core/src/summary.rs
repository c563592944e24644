//! Posterior summarization: moment/quantile tables, between-response
//! correlations, effective sample sizes, and the DIC/WAIC model-comparison
//! criteria.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::mmodel::ArealCounts;
use crate::util::{ln_factorial, log_mean_exp, mean, quantile_sorted, sample_sd};

#[derive(Debug, Error, PartialEq)]
pub enum SummaryError {
    #[error("need at least {need} retained draws, got {got}")]
    TooFewDraws { need: usize, got: usize },
    #[error("correlation summaries need J >= 2 responses")]
    TooFewResponses,
    #[error("draw dimensions do not match the data")]
    DimensionMismatch,
}

/// Mean, SD and central 95% interval of one scalar parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
}

/// Summarize a named draw vector: mean, sample SD, and type-7 quantiles.
pub fn summarize_draws(name: &str, draws: &[f64]) -> Result<ParamSummary, SummaryError> {
    if draws.len() < 10 {
        return Err(SummaryError::TooFewDraws {
            need: 10,
            got: draws.len(),
        });
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(ParamSummary {
        name: name.to_string(),
        mean: mean(draws),
        sd: sample_sd(draws),
        q025: quantile_sorted(&sorted, 0.025),
        q50: quantile_sorted(&sorted, 0.5),
        q975: quantile_sorted(&sorted, 0.975),
    })
}

/// Posterior median and 95% interval of the correlation
/// `rho_jl = Sigma_jl / sqrt(Sigma_jj Sigma_ll)` computed per draw.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationSummary {
    pub pair: (usize, usize),
    pub median: f64,
    pub q025: f64,
    pub q975: f64,
}

/// Per-pair correlation summaries from a sequence of `Sigma_b` draws
/// (each a `J x J` matrix).
pub fn correlation_summary(
    sigma_draws: &[DMatrix<f64>],
) -> Result<Vec<CorrelationSummary>, SummaryError> {
    let first = sigma_draws.first().ok_or(SummaryError::TooFewDraws {
        need: 1,
        got: 0,
    })?;
    let j = first.nrows();
    if j < 2 {
        return Err(SummaryError::TooFewResponses);
    }
    let mut out = Vec::new();
    for a in 0..j {
        for b in (a + 1)..j {
            let mut rhos: Vec<f64> = sigma_draws
                .iter()
                .map(|s| s[(a, b)] / (s[(a, a)] * s[(b, b)]).sqrt())
                .collect();
            rhos.sort_by(|x, y| x.partial_cmp(y).unwrap());
            out.push(CorrelationSummary {
                pair: (a, b),
                median: quantile_sorted(&rhos, 0.5),
                q025: quantile_sorted(&rhos, 0.025),
                q975: quantile_sorted(&rhos, 0.975),
            });
        }
    }
    Ok(out)
}

/// Poisson log pmf with the factorial constant included, so deviances are
/// comparable across models.
fn poisson_log_pmf(y: f64, mu: f64) -> f64 {
    y * mu.ln() - mu - ln_factorial(y)
}

/// Deviance `-2 sum log p(y | mu)` for a full matrix of means.
pub fn deviance(data: &ArealCounts, mu: &DMatrix<f64>) -> f64 {
    let mut ll = 0.0;
    for c in 0..data.j() {
        for r in 0..data.n() {
            ll += poisson_log_pmf(data.y()[(r, c)], mu[(r, c)]);
        }
    }
    -2.0 * ll
}

/// DIC = mean deviance + p_D, with `p_D = mean deviance - deviance at the
/// posterior mean of mu`. `mu_draws` holds one `n x J` mean matrix per
/// retained draw.
pub fn dic(data: &ArealCounts, mu_draws: &[DMatrix<f64>]) -> Result<(f64, f64), SummaryError> {
    if mu_draws.is_empty() {
        return Err(SummaryError::TooFewDraws { need: 1, got: 0 });
    }
    for m in mu_draws {
        if m.shape() != (data.n(), data.j()) {
            return Err(SummaryError::DimensionMismatch);
        }
    }
    let s = mu_draws.len() as f64;
    let mean_dev = mu_draws.iter().map(|m| deviance(data, m)).sum::<f64>() / s;
    let mut mu_bar = DMatrix::<f64>::zeros(data.n(), data.j());
    for m in mu_draws {
        mu_bar += m;
    }
    mu_bar /= s;
    let p_d = mean_dev - deviance(data, &mu_bar);
    Ok((mean_dev + p_d, p_d))
}

/// WAIC = `-2 (lppd - p_waic)`, with `p_waic` the summed posterior variance
/// of the pointwise log-densities (sample variance, divisor S-1).
pub fn waic(data: &ArealCounts, mu_draws: &[DMatrix<f64>]) -> Result<(f64, f64), SummaryError> {
    if mu_draws.is_empty() {
        return Err(SummaryError::TooFewDraws { need: 1, got: 0 });
    }
    for m in mu_draws {
        if m.shape() != (data.n(), data.j()) {
            return Err(SummaryError::DimensionMismatch);
        }
    }
    let mut lppd = 0.0;
    let mut p_waic = 0.0;
    let mut cell = Vec::with_capacity(mu_draws.len());
    for c in 0..data.j() {
        for r in 0..data.n() {
            cell.clear();
            for m in mu_draws {
                cell.push(poisson_log_pmf(data.y()[(r, c)], m[(r, c)]));
            }
            lppd += log_mean_exp(&cell);
            let sd = sample_sd(&cell);
            p_waic += sd * sd;
        }
    }
    Ok((-2.0 * (lppd - p_waic), p_waic))
}

/// Effective sample size via the initial positive sequence of autocovariance
/// pair sums.
pub fn effective_sample_size(draws: &[f64]) -> f64 {
    let s = draws.len();
    if s < 4 {
        return s as f64;
    }
    let m = mean(draws);
    let centered: Vec<f64> = draws.iter().map(|x| x - m).collect();
    let c0 = centered.iter().map(|x| x * x).sum::<f64>() / s as f64;
    if c0 <= 0.0 {
        return s as f64;
    }
    let autocov = |lag: usize| -> f64 {
        let mut acc = 0.0;
        for i in 0..s - lag {
            acc += centered[i] * centered[i + lag];
        }
        acc / s as f64
    };
    let mut sum_pairs = 0.0;
    let mut lag = 1;
    while lag + 1 < s.min(2000) {
        let pair = autocov(lag) + autocov(lag + 1);
        if pair <= 0.0 {
            break;
        }
        sum_pairs += pair;
        lag += 2;
    }
    let ess = s as f64 / (1.0 + 2.0 * sum_pairs / c0);
    ess.clamp(1.0, s as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn constant_draws_summary() {
        let draws = vec![3.5; 20];
        let s = summarize_draws("x", &draws).unwrap();
        assert_eq!(s.mean, 3.5);
        assert_eq!(s.sd, 0.0);
        assert_eq!((s.q025, s.q50, s.q975), (3.5, 3.5, 3.5));
    }

    #[test]
    fn median_of_1_to_100() {
        let draws: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let s = summarize_draws("x", &draws).unwrap();
        assert_eq!(s.q50, 50.5);
    }

    #[test]
    fn symmetric_draws_have_zero_mean() {
        let mut draws = Vec::new();
        for i in 1..=50 {
            draws.push(i as f64);
            draws.push(-(i as f64));
        }
        let s = summarize_draws("x", &draws).unwrap();
        assert!(s.mean.abs() < 1e-12);
    }

    #[test]
    fn too_few_draws_rejected() {
        assert_eq!(
            summarize_draws("x", &[1.0; 9]).unwrap_err(),
            SummaryError::TooFewDraws { need: 10, got: 9 }
        );
    }

    #[test]
    fn identity_sigma_draws_give_zero_correlation() {
        let draws = vec![DMatrix::<f64>::identity(2, 2); 25];
        let cs = correlation_summary(&draws).unwrap();
        assert_eq!(cs.len(), 1);
        assert_eq!(cs[0].median, 0.0);
        assert_eq!((cs[0].q025, cs[0].q975), (0.0, 0.0));
    }

    #[test]
    fn correlation_hand_value() {
        // Sigma = [[0.9, 0.2970], [0.2970, 0.2]] has rho = 0.70 to 4 places.
        let sigma = DMatrix::from_row_slice(2, 2, &[0.9, 0.2970, 0.2970, 0.2]);
        let draws = vec![sigma; 15];
        let cs = correlation_summary(&draws).unwrap();
        assert!((cs[0].median - 0.70).abs() < 1e-4);
    }

    #[test]
    fn symmetric_correlation_draws_center_at_zero() {
        let mut draws = Vec::new();
        for i in 0..40 {
            let r = 0.5 * if i % 2 == 0 { 1.0 } else { -1.0 };
            draws.push(DMatrix::from_row_slice(2, 2, &[1.0, r, r, 1.0]));
        }
        let cs = correlation_summary(&draws).unwrap();
        assert!(cs[0].median.abs() < 1e-12);
    }

    #[test]
    fn correlation_needs_two_responses() {
        let draws = vec![DMatrix::<f64>::identity(1, 1); 5];
        assert_eq!(
            correlation_summary(&draws).unwrap_err(),
            SummaryError::TooFewResponses
        );
    }

    fn tiny_data() -> ArealCounts {
        ArealCounts::new(
            DMatrix::from_column_slice(1, 1, &[1.0]),
            DMatrix::from_column_slice(1, 1, &[1.0]),
        )
        .unwrap()
    }

    #[test]
    fn single_draw_dic_is_plugin_deviance() {
        let data = tiny_data();
        let mu = DMatrix::from_column_slice(1, 1, &[1.3]);
        let draws = vec![mu.clone(), mu.clone(), mu.clone()];
        let (dic_val, p_d) = dic(&data, &draws).unwrap();
        assert_relative_eq!(p_d, 0.0, epsilon = 1e-12);
        assert_relative_eq!(dic_val, deviance(&data, &mu), epsilon = 1e-12);
    }

    #[test]
    fn waic_zero_penalty_for_identical_draws() {
        let data = tiny_data();
        let mu = DMatrix::from_column_slice(1, 1, &[1.3]);
        let draws = vec![mu.clone(); 5];
        let (_, p_waic) = waic(&data, &draws).unwrap();
        assert_relative_eq!(p_waic, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn waic_two_draw_hand_example() {
        // Y = 1, e = 1, log r in {0, log 2} so mu in {1, 2}.
        // log p(1|1) = -1, log p(1|2) = log 2 - 2.
        let data = tiny_data();
        let draws = vec![
            DMatrix::from_column_slice(1, 1, &[1.0]),
            DMatrix::from_column_slice(1, 1, &[2.0]),
        ];
        let lp1 = -1.0f64;
        let lp2 = 2.0f64.ln() - 2.0;
        let lppd = ((lp1.exp() + lp2.exp()) / 2.0).ln();
        let mean_lp = 0.5 * (lp1 + lp2);
        let p_expect = (lp1 - mean_lp).powi(2) + (lp2 - mean_lp).powi(2); // divisor S-1 = 1
        let (waic_val, p_waic) = waic(&data, &draws).unwrap();
        assert_relative_eq!(p_waic, p_expect, epsilon = 1e-12);
        assert_relative_eq!(waic_val, -2.0 * (lppd - p_expect), epsilon = 1e-12);
    }

    #[test]
    fn duplicating_data_doubles_mean_deviance_and_lppd() {
        let y = DMatrix::from_column_slice(2, 1, &[3.0, 5.0]);
        let e = DMatrix::from_column_slice(2, 1, &[2.0, 4.0]);
        let data = ArealCounts::new(y.clone(), e.clone()).unwrap();
        let y2 = DMatrix::from_fn(4, 1, |r, _| y[(r % 2, 0)]);
        let e2 = DMatrix::from_fn(4, 1, |r, _| e[(r % 2, 0)]);
        let data2 = ArealCounts::new(y2, e2).unwrap();

        let mus: Vec<DMatrix<f64>> = vec![
            DMatrix::from_column_slice(2, 1, &[2.5, 4.5]),
            DMatrix::from_column_slice(2, 1, &[3.1, 5.2]),
        ];
        let mus2: Vec<DMatrix<f64>> = mus
            .iter()
            .map(|m| DMatrix::from_fn(4, 1, |r, _| m[(r % 2, 0)]))
            .collect();

        let s = mus.len() as f64;
        let mean_dev: f64 = mus.iter().map(|m| deviance(&data, m)).sum::<f64>() / s;
        let mean_dev2: f64 = mus2.iter().map(|m| deviance(&data2, m)).sum::<f64>() / s;
        assert_relative_eq!(mean_dev2, 2.0 * mean_dev, epsilon = 1e-10);

        let (w1, p1) = waic(&data, &mus).unwrap();
        let (w2, p2) = waic(&data2, &mus2).unwrap();
        assert_relative_eq!(p2, 2.0 * p1, epsilon = 1e-10);
        assert_relative_eq!(w2, 2.0 * w1, epsilon = 1e-10);
    }

    #[test]
    fn ess_of_iid_draws_is_large() {
        let mut rng = crate::rng::stream_rng(3, &[1]);
        use rand::Rng;
        let draws: Vec<f64> = (0..4000).map(|_| rng.random::<f64>()).collect();
        let ess = effective_sample_size(&draws);
        assert!(ess > 2000.0, "ess {ess}");
        // A perfectly correlated chain has ESS near 1 relative to n.
        let constant: Vec<f64> = (0..1000).map(|i| (i / 500) as f64).collect();
        assert!(effective_sample_size(&constant) < 50.0);
    }
}
