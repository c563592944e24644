//! Python bindings for the multivariate spatial+ model crate.
//!
//! Exposes the areal graph type, the spectral decorrelation operations, and
//! a one-call model fit returning posterior summaries. Build the extension
//! with `cargo build --release -p mspatplus-py` and import the produced
//! `libmspatplus.so` as `mspatplus` (see `python/smoke_test.py`), or use
//! maturin.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use mspatplus_core::dataset;
use mspatplus_core::graph;
use mspatplus_core::mcmc::{fit_mcmc, McmcConfig};
use mspatplus_core::mmodel::{ArealCounts, MModelSpec};
use mspatplus_core::priors::PriorKind;
use mspatplus_core::spectral;

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Undirected adjacency structure of `n` areas.
#[pyclass(name = "ArealGraph", frozen)]
struct PyArealGraph {
    inner: graph::ArealGraph,
}

#[pymethods]
impl PyArealGraph {
    /// Rook-adjacency lattice with `rows * cols` areas.
    #[staticmethod]
    fn grid(rows: usize, cols: usize) -> PyResult<Self> {
        Ok(PyArealGraph {
            inner: graph::ArealGraph::grid(rows, cols).map_err(value_err)?,
        })
    }

    /// Graph from an explicit edge list of 0-based index pairs.
    #[staticmethod]
    fn from_edges(n: usize, edges: Vec<(usize, usize)>) -> PyResult<Self> {
        Ok(PyArealGraph {
            inner: graph::ArealGraph::from_edge_list(n, &edges).map_err(value_err)?,
        })
    }

    /// Parse the `n=<count>` / `<i> <j>` edge-list text format.
    #[staticmethod]
    fn from_edge_list_text(text: &str) -> PyResult<Self> {
        Ok(PyArealGraph {
            inner: graph::ArealGraph::parse_edge_list(text).map_err(value_err)?,
        })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.edges().to_vec()
    }

    #[getter]
    fn degree(&self) -> Vec<usize> {
        self.inner.degree().to_vec()
    }

    #[getter]
    fn connected(&self) -> bool {
        self.inner.is_connected()
    }

    fn to_edge_list_text(&self) -> String {
        self.inner.to_edge_list()
    }

    fn __repr__(&self) -> String {
        format!(
            "ArealGraph(n={}, edges={}, connected={})",
            self.inner.n(),
            self.inner.edges().len(),
            self.inner.is_connected()
        )
    }
}

fn build_structure(graph: &PyArealGraph) -> PyResult<graph::ScaledStructure> {
    graph::ScaledStructure::build(&graph.inner).map_err(value_err)
}

/// Eigenvalues of the neighbourhood matrix `Q = D - W`, descending; with
/// `include_vectors=True` also the eigenvector columns.
#[pyfunction]
#[pyo3(signature = (graph, include_vectors = false))]
fn eigen(py: Python<'_>, graph: &PyArealGraph, include_vectors: bool) -> PyResult<Py<PyDict>> {
    let q = graph.inner.icar_structure().map_err(value_err)?;
    let basis = spectral::eigendecompose(&q).map_err(value_err)?;
    let out = PyDict::new(py);
    out.set_item("eigenvalues", basis.eigenvalues().as_slice().to_vec())?;
    if include_vectors {
        let n = basis.n();
        let vectors: Vec<Vec<f64>> = (0..n)
            .map(|c| basis.vectors().column(c).as_slice().to_vec())
            .collect();
        out.set_item("vectors", vectors)?;
    }
    Ok(out.into())
}

/// Split a covariate into its retained short-scale part `z` and the removed
/// large-scale part `z_star` (the `k` smoothest non-constant eigenvectors
/// plus the constant one).
#[pyfunction]
fn split_covariate(
    py: Python<'_>,
    graph: &PyArealGraph,
    x: Vec<f64>,
    k: usize,
) -> PyResult<Py<PyDict>> {
    let q = graph.inner.icar_structure().map_err(value_err)?;
    let basis = spectral::eigendecompose(&q).map_err(value_err)?;
    let split = spectral::split_covariate(&DVector::from_vec(x), &basis, k).map_err(value_err)?;
    let out = PyDict::new(py);
    out.set_item("z", split.z.as_slice().to_vec())?;
    out.set_item("z_star", split.z_star.as_slice().to_vec())?;
    out.set_item("coefficients", split.coefficients.as_slice().to_vec())?;
    out.set_item("retained", split.retained())?;
    Ok(out.into())
}

/// Number of eigenvectors removed at a removal fraction (half-up rounding).
#[pyfunction]
fn k_from_fraction(n: usize, fraction: f64) -> PyResult<usize> {
    spectral::k_from_fraction(n, fraction).map_err(value_err)
}

/// Standardize a vector to mean 0 and sample SD 1.
#[pyfunction]
fn standardize(x: Vec<f64>) -> PyResult<Vec<f64>> {
    dataset::standardize(&DVector::from_vec(x))
        .map(|v| v.as_slice().to_vec())
        .map_err(value_err)
}

fn parse_prior(name: &str) -> PyResult<PriorKind> {
    match name.to_ascii_lowercase().as_str() {
        "icar" => Ok(PriorKind::Icar),
        "pcar" => Ok(PriorKind::Pcar),
        "bym2" => Ok(PriorKind::Bym2),
        other => Err(PyValueError::new_err(format!(
            "unknown prior `{other}`; expected icar, pcar or bym2"
        ))),
    }
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 {
        return Err(PyValueError::new_err(format!("{what} is empty")));
    }
    let j = rows[0].len();
    if rows.iter().any(|r| r.len() != j) {
        return Err(PyValueError::new_err(format!(
            "{what} rows have uneven lengths"
        )));
    }
    Ok(DMatrix::from_fn(n, j, |r, c| rows[r][c]))
}

/// Fit a multivariate model by MCMC and return posterior summaries.
///
/// `counts` and `expected` are per-area rows with one column per response.
/// `k=None` fits the raw covariate (the spatial baseline); an integer
/// removes that many large-scale eigenvectors from it for every response.
#[pyfunction]
#[pyo3(signature = (
    graph, counts, expected, covariate,
    k = None, prior = "icar", n_burnin = 1000, n_iterations = 2000,
    thin = 2, n_chains = 2, seed = 1
))]
#[allow(clippy::too_many_arguments)]
fn fit(
    py: Python<'_>,
    graph: &PyArealGraph,
    counts: Vec<Vec<f64>>,
    expected: Vec<Vec<f64>>,
    covariate: Vec<f64>,
    k: Option<usize>,
    prior: &str,
    n_burnin: usize,
    n_iterations: usize,
    thin: usize,
    n_chains: usize,
    seed: u64,
) -> PyResult<Py<PyDict>> {
    let y = matrix_from_rows(&counts, "counts")?;
    let e = matrix_from_rows(&expected, "expected")?;
    let j = y.ncols();
    let structure = Arc::new(build_structure(graph)?);
    let n = structure.n();
    let x = dataset::standardize(&DVector::from_vec(covariate)).map_err(value_err)?;

    let design = match k {
        None => x.clone(),
        Some(k) => {
            spectral::split_covariate(&x, structure.basis(), k)
                .map_err(value_err)?
                .z
        }
    };
    let prior_kind = parse_prior(prior)?;
    let spec =
        MModelSpec::new(structure, vec![prior_kind; j], vec![design; j]).map_err(value_err)?;
    let data = ArealCounts::new(y, e).map_err(value_err)?;
    let cfg = McmcConfig {
        n_burnin,
        n_iterations,
        thin,
        n_chains,
        seed,
        ..McmcConfig::default()
    };
    let samples = fit_mcmc(&spec, &data, &cfg).map_err(value_err)?;

    let out = PyDict::new(py);
    out.set_item("model", spectral::model_label(n, k))?;
    out.set_item("prior", prior_kind.label())?;
    let summaries = PyDict::new(py);
    for s in samples.summaries().map_err(value_err)? {
        let row = PyDict::new(py);
        row.set_item("mean", s.mean)?;
        row.set_item("sd", s.sd)?;
        row.set_item("q025", s.q025)?;
        row.set_item("q50", s.q50)?;
        row.set_item("q975", s.q975)?;
        summaries.set_item(s.name, row)?;
    }
    out.set_item("summaries", summaries)?;
    if j >= 2 {
        let cors: Vec<Py<PyDict>> = samples
            .correlation()
            .map_err(value_err)?
            .into_iter()
            .map(|c| {
                let row = PyDict::new(py);
                row.set_item("pair", (c.pair.0 + 1, c.pair.1 + 1)).unwrap();
                row.set_item("median", c.median).unwrap();
                row.set_item("q025", c.q025).unwrap();
                row.set_item("q975", c.q975).unwrap();
                row.into()
            })
            .collect();
        out.set_item("correlation", cors)?;
    }
    let (dic, _) = samples.dic(&data).map_err(value_err)?;
    let (waic, _) = samples.waic(&data).map_err(value_err)?;
    out.set_item("dic", dic)?;
    out.set_item("waic", waic)?;
    let risk = samples.risk_posterior_mean();
    let risk_rows: Vec<Vec<f64>> = (0..risk.nrows())
        .map(|r| (0..risk.ncols()).map(|c| risk[(r, c)]).collect())
        .collect();
    out.set_item("risk_mean", risk_rows)?;
    Ok(out.into())
}

#[pymodule]
fn mspatplus(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyArealGraph>()?;
    m.add_function(wrap_pyfunction!(eigen, m)?)?;
    m.add_function(wrap_pyfunction!(split_covariate, m)?)?;
    m.add_function(wrap_pyfunction!(k_from_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(standardize, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    Ok(())
}
