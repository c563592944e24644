//! Spectral decomposition of the neighbourhood matrix and the one-step
//! covariate split.
//!
//! The eigenvectors of `Q = D - W` form an orthonormal basis ordered here by
//! strictly descending eigenvalue, so the last column is the constant vector
//! (eigenvalue 0 for a connected graph) and the smoothest non-constant
//! directions sit at the end. Expanding a covariate `X` in this basis and
//! dropping the trailing `k + 1` columns (the `k` smoothest plus the
//! constant) yields the short-scale part `Z`; the removed large-scale part
//! is `Z* = X - Z`. Fitting a spatial model with `Z` in place of `X` is the
//! one-step decorrelation used throughout the crate.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpectralError {
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("multiple eigenvalues near zero; input does not come from a connected graph")]
    MultipleZeroEigenvalues,
    #[error("vector length {got} does not match basis dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("k={k} out of range; need 0 <= k <= n-2 with n={n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("fraction {fraction} removes more than n-2 of n={n} eigenvectors")]
    FractionTooLarge { fraction: f64, n: usize },
}

/// Orthonormal eigenbasis of `Q`, eigenvalues in descending order.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    u: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    zero_tol: f64,
}

impl SpectralBasis {
    /// Eigenvector matrix, columns ordered by descending eigenvalue.
    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Threshold below which an eigenvalue is treated as zero.
    pub fn zero_tolerance(&self) -> f64 {
        self.zero_tol
    }

    /// Coefficients `a = U' x` of a vector in the basis.
    pub fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>, SpectralError> {
        if x.len() != self.n() {
            return Err(SpectralError::DimensionMismatch {
                expected: self.n(),
                got: x.len(),
            });
        }
        Ok(self.u.transpose() * x)
    }
}

/// Result of splitting a covariate into short-scale (`z`) and removed
/// large-scale (`z_star`) parts; `x = z + z_star` by construction.
#[derive(Debug, Clone)]
pub struct CovariateSplit {
    pub z: DVector<f64>,
    pub z_star: DVector<f64>,
    pub k: usize,
    pub coefficients: DVector<f64>,
}

impl CovariateSplit {
    /// Number of eigenvectors spanning `z`, i.e. `n - (k + 1)`.
    pub fn retained(&self) -> usize {
        self.z.len() - (self.k + 1)
    }
}

/// Eigendecompose a symmetric matrix coming from a connected graph.
///
/// Postconditions: eigenvalues descending with exactly one within `1e-9` of
/// zero; each column's largest-magnitude entry is positive (deterministic
/// sign convention), so the last column is the positive constant vector.
pub fn eigendecompose(q: &DMatrix<f64>) -> Result<SpectralBasis, SpectralError> {
    let n = q.nrows();
    let sym_tol = 1e-10 * (1.0 + q.abs().max());
    for i in 0..n {
        for j in (i + 1)..n {
            if (q[(i, j)] - q[(j, i)]).abs() > sym_tol {
                return Err(SpectralError::NotSymmetric);
            }
        }
    }
    let eig = q.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut u = DMatrix::<f64>::zeros(n, n);
    let mut vals = DVector::<f64>::zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        vals[dst] = eig.eigenvalues[src];
        let col = eig.eigenvectors.column(src);
        // Sign convention: first entry of largest magnitude made positive.
        let mut pivot = 0;
        for i in 1..n {
            if col[i].abs() > col[pivot].abs() + 1e-14 {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            u[(i, dst)] = sign * col[i];
        }
    }

    let zero_eigs = vals.iter().filter(|v| v.abs() <= 1e-9).count();
    if zero_eigs != 1 {
        return Err(SpectralError::MultipleZeroEigenvalues);
    }

    let max = vals[0].abs().max(1.0);
    Ok(SpectralBasis {
        u,
        eigenvalues: vals,
        zero_tol: 1e-10 * max,
    })
}

/// Split a covariate: `z_star` spans the `k + 1` trailing (smoothest)
/// eigenvectors including the constant one, `z` the remaining `n - (k + 1)`.
pub fn split_covariate(
    x: &DVector<f64>,
    basis: &SpectralBasis,
    k: usize,
) -> Result<CovariateSplit, SpectralError> {
    let n = basis.n();
    if k > n - 2 {
        return Err(SpectralError::KOutOfRange { k, n });
    }
    let coefficients = basis.project(x)?;
    let retained = n - (k + 1);
    let mut z = DVector::<f64>::zeros(n);
    for c in 0..retained {
        let a = coefficients[c];
        z.axpy(a, &basis.vectors().column(c).clone_owned(), 1.0);
    }
    let z_star = x - &z;
    Ok(CovariateSplit {
        z,
        z_star,
        k,
        coefficients,
    })
}

/// Number of eigenvectors to remove for a removal fraction, rounded half-up.
pub fn k_from_fraction(n: usize, fraction: f64) -> Result<usize, SpectralError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(SpectralError::FractionTooLarge { fraction, n });
    }
    let k = (fraction * n as f64 + 0.5).floor() as usize;
    if k > n - 2 {
        return Err(SpectralError::FractionTooLarge { fraction, n });
    }
    Ok(k)
}

/// Table-style model label: `M-Spatial` for the unsplit covariate, otherwise
/// `M-SpatPlus<retained>` with `retained = n - (k + 1)`.
pub fn model_label(n: usize, k: Option<usize>) -> String {
    match k {
        None => "M-Spatial".to_string(),
        Some(k) => format!("M-SpatPlus{}", n - (k + 1)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ArealGraph;
    use crate::testutil;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn path_q(n: usize) -> DMatrix<f64> {
        let pairs: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
        ArealGraph::from_edge_list(n, &pairs)
            .unwrap()
            .icar_structure()
            .unwrap()
    }

    #[test]
    fn path2_analytic_eigenpairs() {
        let basis = eigendecompose(&path_q(2)).unwrap();
        let s = 1.0 / 2.0f64.sqrt();
        assert_relative_eq!(basis.eigenvalues()[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(basis.eigenvalues()[1], 0.0, epsilon = 1e-12);
        // Sign convention: first max-magnitude entry positive.
        assert_relative_eq!(basis.vectors()[(0, 0)], s, epsilon = 1e-12);
        assert_relative_eq!(basis.vectors()[(1, 0)], -s, epsilon = 1e-12);
        assert_relative_eq!(basis.vectors()[(0, 1)], s, epsilon = 1e-12);
        assert_relative_eq!(basis.vectors()[(1, 1)], s, epsilon = 1e-12);
    }

    #[test]
    fn path3_characteristic_polynomial_roots() {
        // det(Q - t I) = -t (t - 1)(t - 3) for the 3-path Laplacian.
        let basis = eigendecompose(&path_q(3)).unwrap();
        let expect = [3.0, 1.0, 0.0];
        for (i, e) in expect.iter().enumerate() {
            assert_relative_eq!(basis.eigenvalues()[i], *e, epsilon = 1e-10);
        }
    }

    #[test]
    fn basis_diagonalizes_q() {
        for g in testutil::small_connected_graphs() {
            let q = g.icar_structure().unwrap();
            let basis = eigendecompose(&q).unwrap();
            let d = basis.vectors().transpose() * &q * basis.vectors();
            for i in 0..g.n() {
                for j in 0..g.n() {
                    if i != j {
                        assert!(d[(i, j)].abs() < 1e-8, "off-diagonal {}", d[(i, j)]);
                    }
                }
            }
            let ortho = basis.vectors().transpose() * basis.vectors();
            assert!((ortho - DMatrix::identity(g.n(), g.n())).abs().max() < 1e-10);
            // Last column proportional to ones, positive.
            let last = basis.vectors().column(g.n() - 1);
            let expect = 1.0 / (g.n() as f64).sqrt();
            for v in last.iter() {
                assert_relative_eq!(*v, expect, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn asymmetric_input_rejected() {
        let mut q = path_q(3);
        q[(0, 1)] = 5.0;
        assert_eq!(
            eigendecompose(&q).unwrap_err(),
            SpectralError::NotSymmetric
        );
    }

    #[test]
    fn disconnected_input_rejected() {
        let g = ArealGraph::from_edge_list(4, &[(0, 1), (2, 3)]).unwrap();
        // Assemble Q by hand since icar_structure refuses disconnected graphs.
        let mut q = DMatrix::<f64>::zeros(4, 4);
        for &(a, b) in g.edges() {
            q[(a, a)] += 1.0;
            q[(b, b)] += 1.0;
            q[(a, b)] = -1.0;
            q[(b, a)] = -1.0;
        }
        assert_eq!(
            eigendecompose(&q).unwrap_err(),
            SpectralError::MultipleZeroEigenvalues
        );
    }

    #[test]
    fn project_examples() {
        let basis = eigendecompose(&path_q(2)).unwrap();
        // X = first basis column -> e_1.
        let x = basis.vectors().column(0).clone_owned();
        let a = basis.project(&x).unwrap();
        assert_relative_eq!(a[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(a[1], 0.0, epsilon = 1e-12);
        // X = ones -> (0, sqrt(2)).
        let ones = DVector::from_element(2, 1.0);
        let a = basis.project(&ones).unwrap();
        assert_relative_eq!(a[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(a[1], 2.0f64.sqrt(), epsilon = 1e-12);
        // X = 0 -> 0.
        let zero = DVector::zeros(2);
        assert_eq!(basis.project(&zero).unwrap(), DVector::zeros(2));
        // Length mismatch.
        assert!(basis.project(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn reconstruction_from_projection() {
        let q = ArealGraph::grid(3, 3).unwrap().icar_structure().unwrap();
        let basis = eigendecompose(&q).unwrap();
        let mut rng = crate::rng::stream_rng(5, &[1]);
        let x = DVector::from_fn(9, |_, _| rng.random::<f64>() - 0.5);
        let a = basis.project(&x).unwrap();
        let back = basis.vectors() * a;
        assert!((back - &x).abs().max() < 1e-10);
    }

    #[test]
    fn split_table1_wiring() {
        // n=70: k in {5,10,15,20} retains {64,59,54,49} eigenvectors.
        let n = 70;
        for (k, retained) in [(5, 64), (10, 59), (15, 54), (20, 49)] {
            assert_eq!(n - (k + 1), retained);
            assert_eq!(model_label(n, Some(k)), format!("M-SpatPlus{retained}"));
        }
        assert_eq!(model_label(n, None), "M-Spatial");
    }

    #[test]
    fn split_k0_on_centered_covariate() {
        let q = ArealGraph::grid(2, 3).unwrap().icar_structure().unwrap();
        let basis = eigendecompose(&q).unwrap();
        let mut rng = crate::rng::stream_rng(2, &[7]);
        let mut x = DVector::from_fn(6, |_, _| rng.random::<f64>() - 0.5);
        let mean = x.sum() / 6.0;
        x.add_scalar_mut(-mean);
        let split = split_covariate(&x, &basis, 0).unwrap();
        assert!((&split.z - &x).abs().max() < 1e-10);
        assert!(split.z_star.abs().max() < 1e-10);
        assert_eq!(split.retained(), 5);
    }

    #[test]
    fn split_top_eigenvector_unchanged_for_any_k() {
        let q = ArealGraph::grid(3, 3).unwrap().icar_structure().unwrap();
        let basis = eigendecompose(&q).unwrap();
        let x = basis.vectors().column(0).clone_owned();
        for k in 0..=7 {
            let split = split_covariate(&x, &basis, k).unwrap();
            assert!((&split.z - &x).abs().max() < 1e-10);
            assert!(split.z_star.abs().max() < 1e-10);
        }
        assert_eq!(
            split_covariate(&x, &basis, 8).unwrap_err(),
            SpectralError::KOutOfRange { k: 8, n: 9 }
        );
    }

    #[test]
    fn z_orthogonal_to_removed_columns() {
        let q = ArealGraph::grid(3, 4).unwrap().icar_structure().unwrap();
        let basis = eigendecompose(&q).unwrap();
        let mut rng = crate::rng::stream_rng(3, &[8]);
        let x = DVector::from_fn(12, |_, _| rng.random::<f64>() - 0.5);
        let k = 4;
        let split = split_covariate(&x, &basis, k).unwrap();
        let znorm = split.z.norm();
        for c in (12 - (k + 1))..12 {
            let dot = split.z.dot(&basis.vectors().column(c).clone_owned());
            assert!(
                (dot / znorm).abs() < 1e-8,
                "column {c} not orthogonal: {dot}"
            );
        }
    }

    #[test]
    fn k_from_fraction_examples() {
        assert_eq!(k_from_fraction(70, 0.07).unwrap(), 5);
        assert_eq!(k_from_fraction(70, 0.29).unwrap(), 20);
        assert_eq!(k_from_fraction(70, 0.0).unwrap(), 0);
        assert!(k_from_fraction(70, 0.99).is_err());
        assert!(k_from_fraction(4, 0.8).is_err());
    }

    #[test]
    fn removed_norm_monotone_in_k() {
        let q = ArealGraph::grid(3, 4).unwrap().icar_structure().unwrap();
        let basis = eigendecompose(&q).unwrap();
        let mut rng = crate::rng::stream_rng(11, &[3]);
        let x = DVector::from_fn(12, |_, _| rng.random::<f64>() - 0.5);
        let mut prev = -1.0;
        for k in 0..=10 {
            let split = split_covariate(&x, &basis, k).unwrap();
            let norm = split.z_star.norm_squared();
            assert!(norm >= prev - 1e-12);
            prev = norm;
        }
    }

    #[test]
    fn split_reduces_morans_i_for_smooth_covariates() {
        // Decorrelation direction check: over random smooth covariates on a
        // grid, removing the large-scale part lowers sample Moran's I in a
        // clear majority of draws.
        let g = ArealGraph::grid(4, 5).unwrap();
        let q = g.icar_structure().unwrap();
        let basis = eigendecompose(&q).unwrap();
        let n = g.n();
        let mut rng = crate::rng::stream_rng(21, &[4]);
        let mut wins = 0;
        let trials = 24;
        for _ in 0..trials {
            // Smooth covariate: heavier weight on trailing (smooth) columns.
            let mut x = DVector::<f64>::zeros(n);
            for c in 0..n - 1 {
                let weight = 1.0 / basis.eigenvalues()[c];
                let coef: f64 = rng.random::<f64>() - 0.5;
                x.axpy(
                    coef * weight.sqrt(),
                    &basis.vectors().column(c).clone_owned(),
                    1.0,
                );
            }
            let split = split_covariate(&x, &basis, 4).unwrap();
            if testutil::morans_i(&g, &split.z) <= testutil::morans_i(&g, &x) {
                wins += 1;
            }
        }
        assert!(wins * 2 > trials, "only {wins}/{trials} draws decorrelated");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn split_reconstructs_for_every_k(seed in 0u64..500) {
            let mut rng = crate::rng::stream_rng(seed, &[13]);
            let n = rng.random_range(3..=12);
            let g = testutil::random_connected_graph(n, &mut rng);
            let q = g.icar_structure().unwrap();
            let basis = eigendecompose(&q).unwrap();
            let x = DVector::from_fn(n, |_, _| rng.random::<f64>() * 4.0 - 2.0);
            for k in 0..=n - 2 {
                let split = split_covariate(&x, &basis, k).unwrap();
                prop_assert!((&split.z + &split.z_star - &x).abs().max() < 1e-10);
                prop_assert_eq!(split.retained(), n - (k + 1));
            }
        }
    }
}
