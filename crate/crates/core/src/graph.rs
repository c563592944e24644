//! Areal adjacency structure and the neighbourhood matrix `Q = D - W`.
//!
//! `W` is the binary adjacency matrix of the `n` areas, `D` the diagonal
//! matrix of neighbour counts. For a connected graph `Q` is symmetric
//! positive semidefinite with null space spanned by the constant vector,
//! which is what the intrinsic CAR prior is built on. The BYM2 prior needs
//! a rescaled `Q` whose generalized inverse has unit geometric-mean
//! marginal variance; [`ScaledStructure`] carries that matrix together with
//! the spectral quantities the prior densities reuse.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::spectral::{self, SpectralBasis};

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("area index {index} out of range for n={n}")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("self-loop at area {0}")]
    SelfLoop(usize),
    #[error("need at least 2 areas, got {0}")]
    TooFewAreas(usize),
    #[error("graph is disconnected")]
    DisconnectedGraph,
    #[error("edge list parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Undirected adjacency structure of `n` small areas.
///
/// Edges are stored deduplicated with `i < j`. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ArealGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    degree: Vec<usize>,
    neighbors: Vec<Vec<usize>>,
    connected: bool,
}

impl ArealGraph {
    /// Build a graph from an edge list. Edges are validated, deduplicated
    /// and stored in canonical order; connectivity is computed by traversal.
    pub fn from_edge_list(n: usize, pairs: &[(usize, usize)]) -> Result<Self, GraphError> {
        if n < 2 {
            return Err(GraphError::TooFewAreas(n));
        }
        let mut edges = Vec::with_capacity(pairs.len());
        for &(a, b) in pairs {
            if a >= n {
                return Err(GraphError::IndexOutOfRange { index: a, n });
            }
            if b >= n {
                return Err(GraphError::IndexOutOfRange { index: b, n });
            }
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            edges.push((a.min(b), a.max(b)));
        }
        edges.sort_unstable();
        edges.dedup();

        let mut degree = vec![0usize; n];
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in &edges {
            degree[a] += 1;
            degree[b] += 1;
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for nb in &mut neighbors {
            nb.sort_unstable();
        }

        // Breadth-first traversal from node 0.
        let mut seen = vec![false; n];
        let mut queue = std::collections::VecDeque::new();
        seen[0] = true;
        queue.push_back(0usize);
        let mut count = 1usize;
        while let Some(v) = queue.pop_front() {
            for &w in &neighbors[v] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    queue.push_back(w);
                }
            }
        }

        Ok(ArealGraph {
            n,
            edges,
            degree,
            neighbors,
            connected: count == n,
        })
    }

    /// Rook-adjacency lattice with `rows * cols` areas, indexed row-major.
    pub fn grid(rows: usize, cols: usize) -> Result<Self, GraphError> {
        if rows * cols < 2 {
            return Err(GraphError::TooFewAreas(rows * cols));
        }
        let idx = |r: usize, c: usize| r * cols + c;
        let mut pairs = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                if c + 1 < cols {
                    pairs.push((idx(r, c), idx(r, c + 1)));
                }
                if r + 1 < rows {
                    pairs.push((idx(r, c), idx(r + 1, c)));
                }
            }
        }
        Self::from_edge_list(rows * cols, &pairs)
    }

    /// Parse the plain-text edge-list format: a header line `n=<count>`
    /// followed by one `<i> <j>` pair per line (0-based). Blank lines and
    /// lines starting with `#` are ignored.
    pub fn parse_edge_list(text: &str) -> Result<Self, GraphError> {
        let mut n: Option<usize> = None;
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if n.is_none() {
                let rest = line.strip_prefix("n=").ok_or_else(|| GraphError::Parse {
                    line: lineno + 1,
                    msg: format!("expected header `n=<count>`, got `{line}`"),
                })?;
                let count = rest.trim().parse::<usize>().map_err(|e| GraphError::Parse {
                    line: lineno + 1,
                    msg: format!("bad area count: {e}"),
                })?;
                n = Some(count);
                continue;
            }
            let mut it = line.split_whitespace();
            let a = it.next().and_then(|s| s.parse::<usize>().ok());
            let b = it.next().and_then(|s| s.parse::<usize>().ok());
            match (a, b, it.next()) {
                (Some(a), Some(b), None) => pairs.push((a, b)),
                _ => {
                    return Err(GraphError::Parse {
                        line: lineno + 1,
                        msg: format!("expected `<i> <j>`, got `{line}`"),
                    })
                }
            }
        }
        let n = n.ok_or(GraphError::Parse {
            line: 0,
            msg: "missing `n=<count>` header".into(),
        })?;
        Self::from_edge_list(n, &pairs)
    }

    /// Serialize to the edge-list text format accepted by
    /// [`ArealGraph::parse_edge_list`].
    pub fn to_edge_list(&self) -> String {
        let mut out = String::with_capacity(16 + self.edges.len() * 8);
        out.push_str(&format!("n={}\n", self.n));
        for &(a, b) in &self.edges {
            out.push_str(&format!("{a} {b}\n"));
        }
        out
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degree(&self) -> &[usize] {
        &self.degree
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn is_connected(&self) -> bool {
        self.connected
    }

    /// Neighbourhood matrix `Q = D - W`. Requires a connected graph, which
    /// guarantees rank `n - 1` with null space spanned by the ones vector.
    pub fn icar_structure(&self) -> Result<DMatrix<f64>, GraphError> {
        if !self.connected {
            return Err(GraphError::DisconnectedGraph);
        }
        let n = self.n;
        let mut q = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            q[(i, i)] = self.degree[i] as f64;
        }
        for &(a, b) in &self.edges {
            q[(a, b)] = -1.0;
            q[(b, a)] = -1.0;
        }
        Ok(q)
    }

    /// Eigenvalues of `D^{-1/2} W D^{-1/2}`, ascending. Used for the PCAR
    /// validity interval.
    pub fn normalized_adjacency_spectrum(&self) -> Result<DVector<f64>, GraphError> {
        if !self.connected {
            return Err(GraphError::DisconnectedGraph);
        }
        let n = self.n;
        let mut m = DMatrix::<f64>::zeros(n, n);
        for &(a, b) in &self.edges {
            let v = 1.0 / ((self.degree[a] * self.degree[b]) as f64).sqrt();
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
        let mut eig = m.symmetric_eigen().eigenvalues.as_slice().to_vec();
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(DVector::from_vec(eig))
    }
}

/// `Q` together with its BYM2 scaling: `Q_scaled = scale_factor * Q` is the
/// precision whose generalized inverse has unit geometric-mean diagonal.
///
/// The spectral basis of `Q` is kept alongside because the ICAR
/// pseudo-determinant and the BYM2 mixture density are both functions of the
/// eigenvalues. Immutable after construction and safe to share across
/// threads.
#[derive(Debug, Clone)]
pub struct ScaledStructure {
    q: DMatrix<f64>,
    q_scaled_geninv: DMatrix<f64>,
    scale_factor: f64,
    basis: SpectralBasis,
    pcar_spectrum: DVector<f64>,
    degree: Vec<f64>,
    edges: Vec<(usize, usize)>,
}

impl ScaledStructure {
    /// Build the scaled structure for a connected graph.
    ///
    /// The generalized inverse is computed through the eigendecomposition of
    /// `Q`, dropping the null eigenvalue; the scale factor is the geometric
    /// mean of `diag(Q^-)`, so `diag((Q_scaled)^-)` has geometric mean 1.
    pub fn build(graph: &ArealGraph) -> Result<Self, GraphError> {
        let q = graph.icar_structure()?;
        let basis = spectral::eigendecompose(&q).map_err(|_| GraphError::DisconnectedGraph)?;
        let n = graph.n();

        // Q^- = U diag(1/delta_i) U' over the non-null eigenpairs.
        let mut geninv = DMatrix::<f64>::zeros(n, n);
        for c in 0..n {
            let d = basis.eigenvalues()[c];
            if d > basis.zero_tolerance() {
                let u = basis.vectors().column(c);
                for i in 0..n {
                    for j in 0..n {
                        geninv[(i, j)] += u[i] * u[j] / d;
                    }
                }
            }
        }
        let log_gm: f64 = (0..n).map(|i| geninv[(i, i)].ln()).sum::<f64>() / n as f64;
        let scale_factor = log_gm.exp();
        let q_scaled_geninv = &geninv / scale_factor;

        let pcar_spectrum = graph.normalized_adjacency_spectrum()?;

        Ok(ScaledStructure {
            q,
            q_scaled_geninv,
            scale_factor,
            basis,
            pcar_spectrum,
            degree: graph.degree().iter().map(|&d| d as f64).collect(),
            edges: graph.edges().to_vec(),
        })
    }

    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn q_scaled_geninv(&self) -> &DMatrix<f64> {
        &self.q_scaled_geninv
    }

    pub fn scale_factor(&self) -> f64 {
        self.scale_factor
    }

    pub fn basis(&self) -> &SpectralBasis {
        &self.basis
    }

    /// Ascending eigenvalues of `D^{-1/2} W D^{-1/2}`.
    pub fn pcar_spectrum(&self) -> &DVector<f64> {
        &self.pcar_spectrum
    }

    pub fn degree(&self) -> &[f64] {
        &self.degree
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Quadratic form `theta' Q theta`, evaluated over edges.
    pub fn quad_form_q(&self, theta: &DVector<f64>) -> f64 {
        let mut s = 0.0;
        for &(a, b) in &self.edges {
            let d = theta[a] - theta[b];
            s += d * d;
        }
        s
    }
}
