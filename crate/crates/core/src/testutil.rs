//! Test-only oracles, independent of the production linear-algebra path.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::graph::ArealGraph;

/// Cyclic-sweep Jacobi eigensolver for symmetric matrices. Returns
/// `(eigenvalues, eigenvectors)` with eigenvectors in columns, unordered.
pub fn jacobi_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut m = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..200 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + m.abs().max()) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    (DVector::from_fn(n, |i, _| m[(i, i)]), v)
}

pub fn jacobi_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    jacobi_eigen(a).0.as_slice().to_vec()
}

/// Moore-Penrose pseudo-inverse via the Jacobi eigendecomposition,
/// zeroing eigenvalues below `1e-10 * max`.
pub fn jacobi_pseudo_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let (vals, vecs) = jacobi_eigen(a);
    let max = vals.iter().cloned().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut out = DMatrix::<f64>::zeros(n, n);
    for c in 0..n {
        if vals[c].abs() > 1e-10 * max {
            let u = vecs.column(c);
            for i in 0..n {
                for j in 0..n {
                    out[(i, j)] += u[i] * u[j] / vals[c];
                }
            }
        }
    }
    out
}

/// Random connected graph on `n` nodes: a random spanning tree plus a few
/// extra edges.
pub fn random_connected_graph<R: Rng>(n: usize, rng: &mut R) -> ArealGraph {
    assert!(n >= 2);
    let mut pairs = Vec::new();
    for v in 1..n {
        let u = rng.random_range(0..v);
        pairs.push((u, v));
    }
    let extra = rng.random_range(0..=n / 2);
    for _ in 0..extra {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b {
            pairs.push((a, b));
        }
    }
    ArealGraph::from_edge_list(n, &pairs).unwrap()
}

/// A small fixed family of connected graphs for exhaustive checks.
pub fn small_connected_graphs() -> Vec<ArealGraph> {
    let mut graphs = vec![
        ArealGraph::from_edge_list(2, &[(0, 1)]).unwrap(),
        ArealGraph::from_edge_list(3, &[(0, 1), (1, 2)]).unwrap(),
        ArealGraph::from_edge_list(3, &[(0, 1), (1, 2), (0, 2)]).unwrap(),
        ArealGraph::grid(2, 2).unwrap(),
        ArealGraph::grid(2, 3).unwrap(),
        ArealGraph::grid(3, 3).unwrap(),
    ];
    let mut rng = crate::rng::stream_rng(12345, &[99]);
    for n in [5usize, 7, 10] {
        graphs.push(random_connected_graph(n, &mut rng));
    }
    graphs
}

/// Sample Moran's I with binary weights.
pub fn morans_i(graph: &ArealGraph, x: &DVector<f64>) -> f64 {
    let n = graph.n();
    let mean = x.sum() / n as f64;
    let xc: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let mut num = 0.0;
    for &(a, b) in graph.edges() {
        num += 2.0 * xc[a] * xc[b];
    }
    let denom: f64 = xc.iter().map(|v| v * v).sum();
    let w_sum = 2.0 * graph.edges().len() as f64;
    (n as f64 / w_sum) * (num / denom)
}
