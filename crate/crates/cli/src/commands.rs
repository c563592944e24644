//! Command implementations: `fit`, `simulate`, `eigen`, `compare`.

use nalgebra::{DMatrix, DVector};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use mspatplus_core::dataset::{load_dataset, standardize};
use mspatplus_core::fixtures;
use mspatplus_core::graph::{ArealGraph, ScaledStructure};
use mspatplus_core::mcmc::fit_mcmc;
use mspatplus_core::mmodel::MModelSpec;
use mspatplus_core::priors::PriorKind;
use mspatplus_core::simlab::{
    run_study, simulate_study1, simulate_study2, synthetic_expected, McmcFitter, ModelChoice,
    OracleTruthFitter, ReplicateFitter, Scenario1Spec, Scenario2Spec, StudyData,
};
use mspatplus_core::spectral::{eigendecompose, split_covariate};
use mspatplus_core::util::fmt_f64;

use crate::config::{
    load_config, parse_prior, resolve, CompareConfig, EigenConfig, FitConfig, ModelKSpec,
    SimulateConfig,
};
use crate::CliError;

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", parent.display())))?;
    }
    std::fs::write(path, content)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

/// Deterministic manifest: parsed config (sorted keys), effective seed,
/// package version and synthetic-data flags. No timestamps, so reruns are
/// byte-identical.
fn write_manifest(
    out_dir: &Path,
    command: &str,
    config_text: &str,
    seed: u64,
    extra: &[(&str, serde_json::Value)],
) -> Result<(), CliError> {
    let config: serde_json::Value = serde_json::from_str(config_text)
        .map_err(|e| CliError::validation(format!("config not valid JSON: {e}")))?;
    let mut manifest = serde_json::Map::new();
    manifest.insert("command".into(), command.into());
    manifest.insert("package_version".into(), env!("CARGO_PKG_VERSION").into());
    manifest.insert("seed".into(), seed.into());
    manifest.insert("config".into(), config);
    for (k, v) in extra {
        manifest.insert((*k).to_string(), v.clone());
    }
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(manifest))
        .expect("manifest serializes");
    write_file(&out_dir.join("manifest.json"), &(text + "\n"))
}

fn parse_graph_spec(spec: &str, base: &Path) -> Result<ArealGraph, CliError> {
    if let Some(dims) = spec.strip_prefix("grid:") {
        let parts: Vec<&str> = dims.split(['x', 'X']).collect();
        if parts.len() != 2 {
            return Err(CliError::validation(format!(
                "bad grid spec `{spec}`; expected grid:RxC"
            )));
        }
        let rows: usize = parts[0]
            .parse()
            .map_err(|_| CliError::validation(format!("bad grid rows in `{spec}`")))?;
        let cols: usize = parts[1]
            .parse()
            .map_err(|_| CliError::validation(format!("bad grid cols in `{spec}`")))?;
        ArealGraph::grid(rows, cols).map_err(|e| CliError::validation(e.to_string()))
    } else {
        let path = resolve(base, Path::new(spec));
        let text = std::fs::read_to_string(&path).map_err(|e| {
            CliError::validation(format!("cannot read graph {}: {e}", path.display()))
        })?;
        ArealGraph::parse_edge_list(&text).map_err(|e| CliError::validation(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

pub fn cmd_fit(
    config_path: &Path,
    seed_override: Option<u64>,
    out_override: Option<PathBuf>,
) -> Result<(), CliError> {
    let (mut cfg, base) = load_config::<FitConfig>(config_path)?;
    if let Some(seed) = seed_override {
        cfg.mcmc.seed = seed;
    }
    let out_dir = out_override.unwrap_or_else(|| resolve(&base, &cfg.out_dir));

    let bundle = load_dataset(
        &resolve(&base, &cfg.counts),
        &resolve(&base, &cfg.expected),
        &resolve(&base, &cfg.covariates),
        &resolve(&base, &cfg.adjacency),
    )
    .map_err(|e| CliError::validation(e.to_string()))?;
    if !bundle.graph.is_connected() {
        return Err(CliError::validation("graph is disconnected".into()));
    }
    let n = bundle.n();
    let j = bundle.j();
    let x_raw = bundle
        .covariate(&cfg.covariate)
        .map_err(|e| CliError::validation(e.to_string()))?;
    let x = standardize(x_raw).map_err(|e| CliError::validation(e.to_string()))?;

    let structure = Arc::new(
        ScaledStructure::build(&bundle.graph).map_err(|e| CliError::runtime(e.to_string()))?,
    );

    // Resolve per-response depths; None means the raw covariate.
    let ks: Option<Vec<usize>> = match cfg.model.as_ref().and_then(|m| m.k.as_ref()) {
        None => None,
        Some(ModelKSpec::Shared(k)) => Some(vec![k.resolve(n)?; j]),
        Some(ModelKSpec::PerResponse(list)) => {
            if list.len() != j {
                return Err(CliError::validation(format!(
                    "{} depths for {} responses",
                    list.len(),
                    j
                )));
            }
            Some(
                list.iter()
                    .map(|k| k.resolve(n))
                    .collect::<Result<Vec<_>, _>>()?,
            )
        }
    };
    let model = match &ks {
        None => ModelChoice::spatial(),
        Some(list) => ModelChoice::per_response(n, list.clone()),
    };
    for k in ks.iter().flatten() {
        if *k > n - 2 {
            return Err(CliError::validation(format!(
                "k={k} out of range for n={n}"
            )));
        }
    }

    let prior = parse_prior(&cfg.prior)?;
    let designs: Vec<DVector<f64>> = match &ks {
        None => vec![x.clone(); j],
        Some(list) => list
            .iter()
            .map(|&k| {
                split_covariate(&x, structure.basis(), k)
                    .map(|s| s.z)
                    .map_err(|e| CliError::validation(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?,
    };

    let mut spec = MModelSpec::new(structure.clone(), vec![prior; j], designs)
        .map_err(|e| CliError::validation(e.to_string()))?;
    spec.wishart_scale_sigma2 = cfg.wishart_sigma2;

    let data = bundle.counts().map_err(|e| CliError::validation(e.to_string()))?;
    let mcmc_cfg = cfg.mcmc.to_config();
    let samples = fit_mcmc(&spec, &data, &mcmc_cfg).map_err(|e| CliError::runtime(e.to_string()))?;

    // summary.csv
    let summaries = samples
        .summaries()
        .map_err(|e| CliError::runtime(e.to_string()))?;
    let mut summary = String::from("parameter,mean,sd,q025,q50,q975\n");
    for s in &summaries {
        summary.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.name,
            fmt_f64(s.mean),
            fmt_f64(s.sd),
            fmt_f64(s.q025),
            fmt_f64(s.q50),
            fmt_f64(s.q975)
        ));
    }
    write_file(&out_dir.join("summary.csv"), &summary)?;

    // diagnostics.csv: per-chain block acceptance rates plus per-parameter
    // effective sample sizes.
    let mut diag = String::from("kind,chain,name,value\n");
    for r in &samples.accept_rates {
        diag.push_str(&format!(
            "accept_rate,{},{},{}\n",
            r.chain,
            r.block,
            fmt_f64(r.rate)
        ));
        diag.push_str(&format!("step_size,{},{},{}\n", r.chain, r.block, fmt_f64(r.step)));
    }
    for (name, ess) in samples.effective_sample_sizes() {
        diag.push_str(&format!("ess,all,{},{}\n", name, fmt_f64(ess)));
    }
    write_file(&out_dir.join("diagnostics.csv"), &diag)?;

    // risks.csv: posterior mean relative risk per area and response.
    let risk = samples.risk_posterior_mean();
    let mut risks = String::from("area_id");
    for name in &bundle.crime_names {
        risks.push_str(&format!(",{name}"));
    }
    risks.push('\n');
    for r in 0..n {
        risks.push_str(&r.to_string());
        for c in 0..j {
            risks.push_str(&format!(",{}", fmt_f64(risk[(r, c)])));
        }
        risks.push('\n');
    }
    write_file(&out_dir.join("risks.csv"), &risks)?;

    let (dic, p_d) = samples.dic(&data).map_err(|e| CliError::runtime(e.to_string()))?;
    let (waic, p_waic) = samples
        .waic(&data)
        .map_err(|e| CliError::runtime(e.to_string()))?;
    let config_text = std::fs::read_to_string(config_path)
        .map_err(|e| CliError::validation(format!("config read: {e}")))?;
    write_manifest(
        &out_dir,
        "fit",
        &config_text,
        mcmc_cfg.seed,
        &[
            ("model".into(), model.label.clone().into()),
            ("prior".into(), prior.label().into()),
            ("dic".into(), dic.into()),
            ("dic_p_eff".into(), p_d.into()),
            ("waic".into(), waic.into()),
            ("waic_p_eff".into(), p_waic.into()),
            ("n".into(), n.into()),
            ("responses".into(), j.into()),
        ],
    )?;
    println!(
        "fit: model {} prior {} -> {} (DIC {:.2}, WAIC {:.2})",
        model.label,
        prior.label(),
        out_dir.display(),
        dic,
        waic
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn load_expected(spec: &str, n: usize, base: &Path) -> Result<DMatrix<f64>, CliError> {
    if let Some(seed) = spec.strip_prefix("synthetic:") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| CliError::validation(format!("bad synthetic seed `{spec}`")))?;
        return Ok(synthetic_expected(n, 2, seed));
    }
    let path = resolve(base, Path::new(spec));
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::validation(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = vec![None::<(f64, f64)>; n];
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(CliError::validation(format!(
                "{}:{}: expected area_id,<e1>,<e2>",
                path.display(),
                lineno + 1
            )));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|_| CliError::validation(format!("bad area_id `{}`", fields[0])))?;
        if id >= n || rows[id].is_some() {
            return Err(CliError::validation(format!("bad or duplicate area_id {id}")));
        }
        let e1: f64 = fields[1]
            .parse()
            .map_err(|_| CliError::validation(format!("bad number `{}`", fields[1])))?;
        let e2: f64 = fields[2]
            .parse()
            .map_err(|_| CliError::validation(format!("bad number `{}`", fields[2])))?;
        rows[id] = Some((e1, e2));
    }
    let mut e = DMatrix::<f64>::zeros(n, 2);
    for (i, row) in rows.into_iter().enumerate() {
        let (e1, e2) =
            row.ok_or_else(|| CliError::validation(format!("missing area_id {i}")))?;
        e[(i, 0)] = e1;
        e[(i, 1)] = e2;
    }
    Ok(e)
}

fn load_x1(
    spec: Option<&str>,
    structure: &ScaledStructure,
    base: &Path,
) -> Result<DVector<f64>, CliError> {
    match spec {
        None => Ok(fixtures::smooth_covariate(
            structure,
            fixtures::FIXTURE_COVARIATE_SEED,
        )),
        Some(s) => {
            if let Some(seed) = s.strip_prefix("fixture:") {
                let seed: u64 = seed
                    .parse()
                    .map_err(|_| CliError::validation(format!("bad fixture seed `{s}`")))?;
                Ok(fixtures::smooth_covariate(structure, seed))
            } else if let Some(rest) = s.strip_prefix("file:") {
                let mut parts = rest.rsplitn(2, ':');
                let column = parts
                    .next()
                    .ok_or_else(|| CliError::validation(format!("bad x1 spec `{s}`")))?;
                let path = parts
                    .next()
                    .ok_or_else(|| CliError::validation(format!("bad x1 spec `{s}`")))?;
                let path = resolve(base, Path::new(path));
                let text = std::fs::read_to_string(&path).map_err(|e| {
                    CliError::validation(format!("cannot read {}: {e}", path.display()))
                })?;
                read_covariate_column(&text, column, structure.n())
                    .and_then(|x| standardize(&x).map_err(|e| CliError::validation(e.to_string())))
            } else {
                Err(CliError::validation(format!(
                    "bad x1 spec `{s}`; expected fixture:<seed> or file:<path>:<column>"
                )))
            }
        }
    }
}

fn read_covariate_column(text: &str, column: &str, n: usize) -> Result<DVector<f64>, CliError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::validation("empty covariates file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let idx = cols
        .iter()
        .position(|c| *c == column)
        .ok_or_else(|| CliError::validation(format!("column `{column}` not found")))?;
    let mut rows = vec![None::<f64>; n];
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let id: usize = fields[0]
            .parse()
            .map_err(|_| CliError::validation(format!("bad area_id `{}`", fields[0])))?;
        if id >= n || rows[id].is_some() {
            return Err(CliError::validation(format!("bad or duplicate area_id {id}")));
        }
        let v: f64 = fields[idx]
            .parse()
            .map_err(|_| CliError::validation(format!("bad number `{}`", fields[idx])))?;
        rows[id] = Some(v);
    }
    let mut out = DVector::<f64>::zeros(n);
    for (i, row) in rows.into_iter().enumerate() {
        out[i] = row.ok_or_else(|| CliError::validation(format!("missing area_id {i}")))?;
    }
    Ok(out)
}

pub fn cmd_simulate(
    config_path: &Path,
    seed_override: Option<u64>,
    out_override: Option<PathBuf>,
) -> Result<(), CliError> {
    let (mut cfg, base) = load_config::<SimulateConfig>(config_path)?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    let out_dir = out_override.unwrap_or_else(|| resolve(&base, &cfg.out_dir));

    let graph = parse_graph_spec(&cfg.graph, &base)?;
    if !graph.is_connected() {
        return Err(CliError::validation("graph is disconnected".into()));
    }
    let structure =
        Arc::new(ScaledStructure::build(&graph).map_err(|e| CliError::runtime(e.to_string()))?);
    let n = graph.n();
    let e = load_expected(&cfg.expected, n, &base)?;
    let e_synthetic = cfg.expected.starts_with("synthetic:");

    let study: StudyData = match (cfg.study, cfg.scenario) {
        (1, scenario) => {
            let x1 = load_x1(cfg.x1.as_deref(), &structure, &base)?;
            let spec = match scenario {
                1 => Scenario1Spec::scenario1(x1, e, cfg.replicates),
                2 => Scenario1Spec::scenario2(x1, e, cfg.replicates),
                other => {
                    return Err(CliError::validation(format!(
                        "unknown scenario {other} for study 1"
                    )))
                }
            };
            simulate_study1(&spec, &structure, cfg.seed)
                .map_err(|e| CliError::runtime(e.to_string()))?
        }
        (2, scenario) => {
            let spec = match scenario {
                1 => Scenario2Spec::scenario1(e, cfg.replicates),
                2 => Scenario2Spec::scenario2(e, cfg.replicates),
                other => {
                    return Err(CliError::validation(format!(
                        "unknown scenario {other} for study 2"
                    )))
                }
            };
            simulate_study2(&spec, &structure, cfg.seed)
                .map_err(|e| CliError::runtime(e.to_string()))?
        }
        (other, _) => {
            return Err(CliError::validation(format!(
                "unknown study {other}; expected 1 or 2"
            )))
        }
    };

    let models: Vec<ModelChoice> = cfg
        .ks
        .iter()
        .map(|k| match k {
            None => Ok(ModelChoice::spatial()),
            Some(spec) => {
                let k = spec.resolve(n)?;
                if k > n - 2 {
                    return Err(CliError::validation(format!("k={k} out of range")));
                }
                Ok(ModelChoice::spat_plus(n, k))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let priors: Vec<PriorKind> = cfg
        .priors
        .iter()
        .map(|p| parse_prior(p))
        .collect::<Result<Vec<_>, _>>()?;
    if models.is_empty() || priors.is_empty() {
        return Err(CliError::validation("need at least one model and prior".into()));
    }

    let mcmc_fitter;
    let oracle_fitter;
    let fitter: &dyn ReplicateFitter = match cfg.fitter.as_str() {
        "mcmc" => {
            mcmc_fitter = McmcFitter::new(cfg.mcmc.to_config());
            &mcmc_fitter
        }
        "oracle-truth" => {
            oracle_fitter = OracleTruthFitter;
            &oracle_fitter
        }
        other => {
            return Err(CliError::validation(format!(
                "unknown fitter `{other}`; expected mcmc or oracle-truth"
            )))
        }
    };

    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    let report = run_study(
        &study,
        &models,
        &priors,
        fitter,
        &structure,
        cfg.seed,
        Some(&out_dir),
    )
    .map_err(|e| CliError::runtime(e.to_string()))?;

    let config_text = std::fs::read_to_string(config_path)
        .map_err(|e| CliError::validation(format!("config read: {e}")))?;
    write_manifest(
        &out_dir,
        "simulate",
        &config_text,
        cfg.seed,
        &[
            ("expected_synthetic".into(), e_synthetic.into()),
            ("study".into(), cfg.study.into()),
            ("scenario".into(), cfg.scenario.into()),
            ("replicates".into(), cfg.replicates.into()),
            ("fitter".into(), cfg.fitter.clone().into()),
            (
                "metric_definitions".into(),
                "se_sim: sqrt(mean((est_l - mean est)^2)); se_est: mean posterior SD; \
                 coverage95: percent of replicates whose central 95% interval covers the truth; \
                 MARB: mean over cells of |mean_l relative risk error|; \
                 MRRMSE: mean over cells of sqrt(mean_l squared relative risk error)"
                    .into(),
            ),
        ],
    )?;
    println!(
        "simulate: study {} scenario {} with {} models x {} priors x {} replicates -> {}",
        cfg.study,
        cfg.scenario,
        models.len(),
        priors.len(),
        cfg.replicates,
        out_dir.display()
    );
    for m in &report.models {
        println!(
            "  {} {}: mean DIC {:.2} WAIC {:.2} (failed {})",
            m.model, m.prior, m.mean_dic, m.mean_waic, m.n_failed
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eigen
// ---------------------------------------------------------------------------

pub fn cmd_eigen(
    config: Option<&Path>,
    graph_arg: Option<&str>,
    out_arg: Option<PathBuf>,
    include_vectors_arg: bool,
) -> Result<(), CliError> {
    let (graph_spec, out, include_vectors, base) = match config {
        Some(path) => {
            let (cfg, base) = load_config::<EigenConfig>(path)?;
            (
                cfg.graph.clone(),
                resolve(&base, &cfg.out),
                cfg.include_vectors,
                base,
            )
        }
        None => {
            let graph = graph_arg.ok_or_else(|| {
                CliError::validation("eigen needs --config or --graph/--out".into())
            })?;
            let out = out_arg
                .ok_or_else(|| CliError::validation("eigen needs --out with --graph".into()))?;
            (
                graph.to_string(),
                out,
                include_vectors_arg,
                PathBuf::from("."),
            )
        }
    };

    let graph = parse_graph_spec(&graph_spec, &base)?;
    let q = graph
        .icar_structure()
        .map_err(|e| CliError::validation(e.to_string()))?;
    let basis = eigendecompose(&q).map_err(|e| CliError::runtime(e.to_string()))?;

    let n = graph.n();
    let mut out_text = String::from("index,eigenvalue");
    if include_vectors {
        for r in 0..n {
            out_text.push_str(&format!(",u{r}"));
        }
    }
    out_text.push('\n');
    for c in 0..n {
        out_text.push_str(&format!("{},{}", c, fmt_f64(basis.eigenvalues()[c])));
        if include_vectors {
            for r in 0..n {
                out_text.push_str(&format!(",{}", fmt_f64(basis.vectors()[(r, c)])));
            }
        }
        out_text.push('\n');
    }
    write_file(&out, &out_text)?;
    println!("eigen: {} eigenvalues -> {}", n, out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

pub fn cmd_compare(config_path: &Path, out_override: Option<PathBuf>) -> Result<(), CliError> {
    let (cfg, base) = load_config::<CompareConfig>(config_path)?;
    let out = out_override.unwrap_or_else(|| resolve(&base, &cfg.out));
    if cfg.inputs.is_empty() {
        return Err(CliError::validation("compare needs at least one input".into()));
    }

    let mut table = String::from("model,prior,parameter,mean,sd,q025,q50,q975,dic,waic\n");
    for input in &cfg.inputs {
        let dir = resolve(&base, input);
        let manifest_path = dir.join("manifest.json");
        let manifest: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(&manifest_path).map_err(|e| {
                CliError::validation(format!("cannot read {}: {e}", manifest_path.display()))
            })?,
        )
        .map_err(|e| CliError::validation(format!("bad manifest: {e}")))?;
        let model = manifest["model"].as_str().unwrap_or("?").to_string();
        let prior = manifest["prior"].as_str().unwrap_or("?").to_string();
        let dic = manifest["dic"].as_f64().unwrap_or(f64::NAN);
        let waic = manifest["waic"].as_f64().unwrap_or(f64::NAN);

        let summary_path = dir.join("summary.csv");
        let text = std::fs::read_to_string(&summary_path).map_err(|e| {
            CliError::validation(format!("cannot read {}: {e}", summary_path.display()))
        })?;
        for line in text.lines().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            table.push_str(&format!(
                "{model},{prior},{line},{},{}\n",
                fmt_f64(dic),
                fmt_f64(waic)
            ));
        }
    }
    write_file(&out, &table)?;
    println!("compare: {} fits -> {}", cfg.inputs.len(), out.display());
    Ok(())
}
