//! Cross-module integration checks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use std::sync::Arc;

use mspatplus_core::graph::{ArealGraph, ScaledStructure};
use mspatplus_core::mcmc::{fit_mcmc, McmcConfig};
use mspatplus_core::mmodel::{ArealCounts, MModelSpec};
use mspatplus_core::priors::PriorKind;
use mspatplus_core::rng::stream_rng;
use mspatplus_core::simlab::{simulate_study1, Scenario1Spec};
use mspatplus_core::spectral::split_covariate;

fn summary_value(samples: &mspatplus_core::mcmc::PosteriorSamples, name: &str) -> (f64, f64) {
    let s = samples.summaries().unwrap();
    let p = s.iter().find(|p| p.name == name).unwrap();
    (p.mean, p.sd)
}

/// Relabeling the responses permutes the fixed-effect posteriors and leaves
/// the correlation summary unchanged (up to Monte Carlo error).
#[test]
fn crime_relabeling_swaps_summaries() {
    let g = ArealGraph::grid(3, 4).unwrap();
    let structure = Arc::new(ScaledStructure::build(&g).unwrap());
    let n = structure.n();
    let mut rng = stream_rng(42, &[77]);
    let mut z = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
    let zm = z.sum() / n as f64;
    z.add_scalar_mut(-zm);

    // A shared smooth component makes the between-response correlation
    // data-identified, so the medians being compared are tight.
    let common = mspatplus_core::simlab::smooth_field(structure.basis(), &mut rng);
    let e = DMatrix::from_fn(n, 2, |_, _| 40.0 + 20.0 * rng.random::<f64>());
    let y = DMatrix::from_fn(n, 2, |r, c| {
        let beta = if c == 0 { 0.3 } else { -0.1 };
        let alpha = if c == 0 { 0.1 } else { 0.05 };
        let mu = e[(r, c)] * (alpha + beta * z[r] + 0.4 * common[r]).exp();
        Poisson::new(mu).unwrap().sample(&mut rng)
    });

    let spec = MModelSpec::new(
        structure.clone(),
        vec![PriorKind::Icar, PriorKind::Icar],
        vec![z.clone(), z.clone()],
    )
    .unwrap();
    let swapped_data = ArealCounts::new(
        DMatrix::from_fn(n, 2, |r, c| y[(r, 1 - c)]),
        DMatrix::from_fn(n, 2, |r, c| e[(r, 1 - c)]),
    )
    .unwrap();
    let data = ArealCounts::new(y, e).unwrap();

    let cfg = McmcConfig {
        n_burnin: 2000,
        n_iterations: 6000,
        thin: 3,
        n_chains: 2,
        seed: 9,
        ..McmcConfig::default()
    };
    let fit = fit_mcmc(&spec, &data, &cfg).unwrap();
    let fit_swapped = fit_mcmc(&spec, &swapped_data, &cfg).unwrap();

    for (a, b) in [("alpha[1]", "alpha[2]"), ("beta[1]", "beta[2]")] {
        let (m1, s1) = summary_value(&fit, a);
        let (m2, s2) = summary_value(&fit_swapped, b);
        let tol = 0.5 * (s1 + s2);
        assert!(
            (m1 - m2).abs() < tol,
            "{a} vs swapped {b}: {m1} vs {m2} (tol {tol})"
        );
    }
    let cs1 = &fit.correlation().unwrap()[0];
    let cs2 = &fit_swapped.correlation().unwrap()[0];
    let width = 0.5 * ((cs1.q975 - cs1.q025) + (cs2.q975 - cs2.q025));
    assert!(
        (cs1.median - cs2.median).abs() < 0.35 * width,
        "correlation {} vs swapped {} (posterior width {width})",
        cs1.median,
        cs2.median
    );
}

/// End-to-end: a generated confounding study fit with the decorrelated
/// design produces finite summaries for every parameter and a resolvable
/// decorrelation depth.
#[test]
fn study_fit_round_trip_smoke() {
    let g = ArealGraph::grid(3, 4).unwrap();
    let structure = Arc::new(ScaledStructure::build(&g).unwrap());
    let n = structure.n();
    let mut rng = stream_rng(5, &[3]);
    let mut x1 = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
    let m = x1.sum() / n as f64;
    x1.add_scalar_mut(-m);

    let e = DMatrix::from_element(n, 2, 35.0);
    let spec1 = Scenario1Spec::scenario1(x1.clone(), e, 1);
    let study = simulate_study1(&spec1, &structure, 13).unwrap();

    let k = 3;
    let z = split_covariate(&study.x_obs, structure.basis(), k).unwrap().z;
    let spec = MModelSpec::new(
        structure.clone(),
        vec![PriorKind::Pcar, PriorKind::Pcar],
        vec![z.clone(), z],
    )
    .unwrap();
    let data = ArealCounts::new(study.counts[0].clone(), study.e.clone()).unwrap();
    let cfg = McmcConfig {
        n_burnin: 500,
        n_iterations: 1000,
        thin: 2,
        n_chains: 1,
        seed: 2,
        ..McmcConfig::default()
    };
    let samples = fit_mcmc(&spec, &data, &cfg).unwrap();
    for s in samples.summaries().unwrap() {
        assert!(s.mean.is_finite() && s.sd.is_finite(), "{}", s.name);
    }
    let (dic, _) = samples.dic(&data).unwrap();
    let (waic, _) = samples.waic(&data).unwrap();
    assert!(dic.is_finite() && waic.is_finite());
    // PCAR hyperparameters stayed in their prior support.
    for r in samples.param_draws("rho[1]").unwrap() {
        assert!(*r > 0.0 && *r < 1.0);
    }
}
