//! JSON run configurations. All paths are resolved relative to the config
//! file's directory.

use serde::Deserialize;
use std::path::{Path, PathBuf};

use mspatplus_core::mcmc::McmcConfig;
use mspatplus_core::priors::PriorKind;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcSettings {
    #[serde(default = "default_burnin")]
    pub n_burnin: usize,
    #[serde(default = "default_iterations")]
    pub n_iterations: usize,
    #[serde(default = "default_thin")]
    pub thin: usize,
    #[serde(default = "default_chains")]
    pub n_chains: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_adapt_target")]
    pub adapt_target: f64,
}

fn default_burnin() -> usize {
    5000
}
fn default_iterations() -> usize {
    20_000
}
fn default_thin() -> usize {
    10
}
fn default_chains() -> usize {
    3
}
fn default_seed() -> u64 {
    1
}
fn default_adapt_target() -> f64 {
    0.35
}

impl Default for McmcSettings {
    fn default() -> Self {
        McmcSettings {
            n_burnin: default_burnin(),
            n_iterations: default_iterations(),
            thin: default_thin(),
            n_chains: default_chains(),
            seed: default_seed(),
            adapt_target: default_adapt_target(),
        }
    }
}

impl McmcSettings {
    pub fn to_config(&self) -> McmcConfig {
        McmcConfig {
            n_burnin: self.n_burnin,
            n_iterations: self.n_iterations,
            thin: self.thin,
            n_chains: self.n_chains,
            seed: self.seed,
            adapt_target: self.adapt_target,
            ..McmcConfig::default()
        }
    }
}

/// Decorrelation depth: an eigenvector count or a fraction string like
/// `"14%"` resolved against `n`.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum KSpec {
    Count(usize),
    Fraction(String),
}

impl KSpec {
    pub fn resolve(&self, n: usize) -> Result<usize, CliError> {
        match self {
            KSpec::Count(k) => Ok(*k),
            KSpec::Fraction(s) => {
                let trimmed = s.trim();
                let percent = trimmed.strip_suffix('%').ok_or_else(|| {
                    CliError::validation(format!(
                        "k fraction `{s}` must be a percentage like \"14%\""
                    ))
                })?;
                let value: f64 = percent.trim().parse().map_err(|_| {
                    CliError::validation(format!("bad percentage `{s}`"))
                })?;
                mspatplus_core::spectral::k_from_fraction(n, value / 100.0)
                    .map_err(|e| CliError::validation(e.to_string()))
            }
        }
    }
}

/// Per-response or shared decorrelation depths; absent means the raw
/// covariate (the spatial baseline).
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ModelKSpec {
    Shared(KSpec),
    PerResponse(Vec<KSpec>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub k: Option<ModelKSpec>,
}

fn default_prior() -> String {
    "icar".to_string()
}

pub fn parse_prior(name: &str) -> Result<PriorKind, CliError> {
    match name.to_ascii_lowercase().as_str() {
        "icar" => Ok(PriorKind::Icar),
        "pcar" => Ok(PriorKind::Pcar),
        "bym2" => Ok(PriorKind::Bym2),
        other => Err(CliError::validation(format!(
            "unknown prior `{other}`; expected icar, pcar or bym2"
        ))),
    }
}

/// Configuration for `fit`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub counts: PathBuf,
    pub expected: PathBuf,
    pub covariates: PathBuf,
    pub adjacency: PathBuf,
    /// Covariate column to use.
    pub covariate: String,
    #[serde(default)]
    pub model: Option<ModelSection>,
    #[serde(default = "default_prior")]
    pub prior: String,
    #[serde(default = "default_wishart_sigma2")]
    pub wishart_sigma2: f64,
    #[serde(default)]
    pub mcmc: McmcSettings,
    pub out_dir: PathBuf,
}

pub fn default_wishart_sigma2() -> f64 {
    1000.0
}

/// Configuration for `simulate`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    /// 1 or 2.
    pub study: u8,
    /// Scenario preset: 1 or 2.
    #[serde(default = "default_scenario")]
    pub scenario: u8,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    /// `"grid:RxC"` or a path to an edge-list file.
    pub graph: String,
    /// Study 1 only: `"fixture:<seed>"` or a covariates CSV path plus column
    /// name, e.g. `"file:covs.csv:x1"`.
    #[serde(default)]
    pub x1: Option<String>,
    /// `"synthetic:<seed>"` or a path to an expected-counts CSV.
    pub expected: String,
    /// Decorrelation depths to fit; `null` entries mean the spatial
    /// baseline.
    pub ks: Vec<Option<KSpec>>,
    pub priors: Vec<String>,
    #[serde(default = "default_fitter")]
    pub fitter: String,
    #[serde(default)]
    pub mcmc: McmcSettings,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn default_scenario() -> u8 {
    1
}
fn default_replicates() -> usize {
    50
}
fn default_fitter() -> String {
    "mcmc".to_string()
}

/// Configuration for `eigen`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EigenConfig {
    pub graph: String,
    pub out: PathBuf,
    #[serde(default)]
    pub include_vectors: bool,
}

/// Configuration for `compare`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    /// Fit output directories to join.
    pub inputs: Vec<PathBuf>,
    pub out: PathBuf,
}

/// Read and parse a JSON config, returning it with the directory that
/// relative paths resolve against.
pub fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<(T, PathBuf), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::validation(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: T = serde_json::from_str(&text)
        .map_err(|e| CliError::validation(format!("bad config {}: {e}", path.display())))?;
    let base = path
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."));
    Ok((cfg, base))
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
