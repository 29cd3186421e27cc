//! Cross-module invariants: bridges between network construction, the
//! contrast, and the mixing machinery.

use vaelab::ima::{cima_global_mc, cima_local};
use vaelab::mixing::{mix_forward, MixingKind, MixingSpec, SourceDistribution};
use vaelab::nets::{init_mlp, mlp_jacobian, Activation, InitMode};

/// A single orthogonal linear layer has exactly orthogonal Jacobian columns,
/// so its contrast vanishes at every point.
#[test]
fn orthogonal_linear_layer_has_zero_contrast() {
    for seed in 0..10 {
        let params = init_mlp(&[3, 3], InitMode::Orthogonal, Activation::Identity, seed).unwrap();
        let j = mlp_jacobian(&params, &[0.3, -0.8, 1.1]).unwrap();
        let c = cima_local(&j).unwrap();
        assert!(c.abs() < 1e-12, "seed {seed}: contrast {c}");
    }
}

/// The upper-triangular sigmoid construction sits outside the
/// orthogonal-column class: its global contrast is positive and the
/// Monte-Carlo estimate is stable as the sample count grows.
#[test]
fn triangular_sigmoid_contrast_positive_and_stable() {
    let params = init_mlp(&[2, 2, 2], InitMode::UpperTriangular, Activation::Sigmoid, 0x6A7)
        .unwrap();
    let spec = MixingSpec::new(MixingKind::Mlp(params), 2).unwrap();
    let dist = SourceDistribution::standard_gaussian(2);
    let (mean_small, stderr_small) = cima_global_mc(&spec, &dist, 10_000, 1).unwrap();
    let (mean_large, stderr_large) = cima_global_mc(&spec, &dist, 100_000, 2).unwrap();
    assert!(mean_small > 0.0 && mean_large > 0.0);
    assert!(stderr_large < stderr_small);
    // Estimates agree within combined Monte-Carlo noise.
    let tol = 4.0 * (stderr_small * stderr_small + stderr_large * stderr_large).sqrt();
    assert!(
        (mean_small - mean_large).abs() < tol,
        "{mean_small} vs {mean_large} (tol {tol})"
    );
}

/// A triangular MLP's Jacobian is upper triangular everywhere, which gives
/// the contrast a closed form in 2D: 0.5 ln(1 + (J12/J22)^2).
#[test]
fn triangular_contrast_closed_form_2d() {
    let params = init_mlp(&[2, 2, 2], InitMode::UpperTriangular, Activation::Sigmoid, 42).unwrap();
    let spec = MixingSpec::new(MixingKind::Mlp(params), 2).unwrap();
    for z in [[0.0, 0.0], [0.7, -0.4], [-1.2, 0.9]] {
        let (_, j) = mix_forward(&spec, &z, true).unwrap();
        let j = j.unwrap();
        assert!(j[(1, 0)].abs() < 1e-15, "lower-left entry {}", j[(1, 0)]);
        let expected = 0.5 * (1.0 + (j[(0, 1)] / j[(1, 1)]).powi(2)).ln();
        let c = cima_local(&j).unwrap();
        assert!((c - expected).abs() < 1e-12, "{c} vs {expected}");
    }
}
