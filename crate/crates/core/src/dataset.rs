//! Dataset ingestion and covariate standardization.
//!
//! Counts, expected counts and covariates arrive as CSV files sharing the
//! schema `area_id, <columns...>`; the adjacency arrives as an edge list.
//! `area_id` is the 0-based node index of the adjacency graph, so rows may
//! appear in any order: files are joined on the id, and every id in
//! `0..n` must appear exactly once. `NA` tokens in numeric columns are a
//! hard error rather than a silent missing value.

use nalgebra::{DMatrix, DVector};
use std::path::Path;
use thiserror::Error;

use crate::graph::{ArealGraph, GraphError};
use crate::mmodel::{ArealCounts, ModelError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("negative count at area {area}, column {column}")]
    NegativeCount { area: usize, column: String },
    #[error("non-positive expected count at area {area}, column {column}")]
    NonPositiveExpected { area: usize, column: String },
    #[error("unknown or duplicate area id {0}")]
    UnknownAreaId(String),
    #[error("covariate `{0}` not found")]
    UnknownCovariate(String),
    #[error("constant vector cannot be standardized")]
    ConstantVector,
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A parsed and validated dataset: graph, counts, expecteds and named
/// covariates, all indexed by node id.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub graph: ArealGraph,
    pub y: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub covariates: Vec<(String, DVector<f64>)>,
    pub crime_names: Vec<String>,
}

impl DatasetBundle {
    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn j(&self) -> usize {
        self.y.ncols()
    }

    pub fn covariate(&self, name: &str) -> Result<&DVector<f64>, DatasetError> {
        self.covariates
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
            .ok_or_else(|| DatasetError::UnknownCovariate(name.to_string()))
    }

    pub fn counts(&self) -> Result<ArealCounts, DatasetError> {
        Ok(ArealCounts::new(self.y.clone(), self.e.clone())?)
    }
}

/// Standardize to mean 0 and sample SD 1 (divisor `n - 1`).
pub fn standardize(x: &DVector<f64>) -> Result<DVector<f64>, DatasetError> {
    let n = x.len();
    let mean = x.sum() / n as f64;
    let ss: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    let sd = (ss / (n - 1) as f64).sqrt();
    if sd <= 1e-12 * (1.0 + mean.abs()) {
        return Err(DatasetError::ConstantVector);
    }
    Ok(DVector::from_fn(n, |i, _| (x[i] - mean) / sd))
}

/// One numeric CSV with an `area_id` key column: header row, then one row
/// per area in any order.
struct KeyedTable {
    columns: Vec<String>,
    /// `values[row sorted by area_id][column]`.
    values: Vec<Vec<f64>>,
}

fn parse_keyed_csv(text: &str, path: &str, n_expected: usize) -> Result<KeyedTable, DatasetError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| DatasetError::Parse {
        path: path.into(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let cols: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    if cols.is_empty() || cols[0] != "area_id" {
        return Err(DatasetError::Parse {
            path: path.into(),
            line: 1,
            msg: format!("first header column must be `area_id`, got `{header}`"),
        });
    }
    let columns: Vec<String> = cols[1..].to_vec();
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; n_expected];
    for (lineno, raw) in lines {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(|s| s.trim()).collect();
        if fields.len() != columns.len() + 1 {
            return Err(DatasetError::Parse {
                path: path.into(),
                line: lineno + 1,
                msg: format!(
                    "expected {} fields, got {}",
                    columns.len() + 1,
                    fields.len()
                ),
            });
        }
        let id: usize = fields[0].parse().map_err(|_| DatasetError::Parse {
            path: path.into(),
            line: lineno + 1,
            msg: format!("bad area_id `{}`", fields[0]),
        })?;
        if id >= n_expected {
            return Err(DatasetError::UnknownAreaId(fields[0].to_string()));
        }
        if rows[id].is_some() {
            return Err(DatasetError::UnknownAreaId(format!("{id} (duplicate)")));
        }
        let mut vals = Vec::with_capacity(columns.len());
        for f in &fields[1..] {
            if f.eq_ignore_ascii_case("na") || f.eq_ignore_ascii_case("nan") || f.is_empty() {
                return Err(DatasetError::Parse {
                    path: path.into(),
                    line: lineno + 1,
                    msg: format!("missing/NA value `{f}` in numeric column"),
                });
            }
            let v: f64 = f.parse().map_err(|_| DatasetError::Parse {
                path: path.into(),
                line: lineno + 1,
                msg: format!("bad number `{f}`"),
            })?;
            vals.push(v);
        }
        rows[id] = Some(vals);
    }
    let mut values = Vec::with_capacity(n_expected);
    for (id, row) in rows.into_iter().enumerate() {
        values.push(row.ok_or_else(|| DatasetError::UnknownAreaId(format!("{id} (missing)")))?);
    }
    Ok(KeyedTable { columns, values })
}

fn read_to_string(path: &Path) -> Result<String, DatasetError> {
    std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Load and cross-validate the four input files.
pub fn load_dataset(
    counts_csv: &Path,
    expected_csv: &Path,
    covariates_csv: &Path,
    adjacency_file: &Path,
) -> Result<DatasetBundle, DatasetError> {
    let graph = ArealGraph::parse_edge_list(&read_to_string(adjacency_file)?)?;
    let n = graph.n();
    let counts = parse_keyed_csv(
        &read_to_string(counts_csv)?,
        &counts_csv.display().to_string(),
        n,
    )?;
    let expected = parse_keyed_csv(
        &read_to_string(expected_csv)?,
        &expected_csv.display().to_string(),
        n,
    )?;
    let covs = parse_keyed_csv(
        &read_to_string(covariates_csv)?,
        &covariates_csv.display().to_string(),
        n,
    )?;

    if counts.columns != expected.columns {
        return Err(DatasetError::DimensionMismatch(format!(
            "count columns {:?} != expected columns {:?}",
            counts.columns, expected.columns
        )));
    }
    let j = counts.columns.len();
    if j == 0 {
        return Err(DatasetError::DimensionMismatch(
            "no response columns".into(),
        ));
    }

    let y = DMatrix::from_fn(n, j, |r, c| counts.values[r][c]);
    let e = DMatrix::from_fn(n, j, |r, c| expected.values[r][c]);
    for r in 0..n {
        for c in 0..j {
            if y[(r, c)] < 0.0 {
                return Err(DatasetError::NegativeCount {
                    area: r,
                    column: counts.columns[c].clone(),
                });
            }
            if e[(r, c)] <= 0.0 {
                return Err(DatasetError::NonPositiveExpected {
                    area: r,
                    column: expected.columns[c].clone(),
                });
            }
        }
    }

    let covariates = covs
        .columns
        .iter()
        .enumerate()
        .map(|(c, name)| {
            (
                name.clone(),
                DVector::from_fn(n, |r, _| covs.values[r][c]),
            )
        })
        .collect();

    Ok(DatasetBundle {
        graph,
        y,
        e,
        covariates,
        crime_names: counts.columns,
    })
}
