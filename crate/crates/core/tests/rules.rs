use std::sync::Arc;

use lavreg::lavrentiev::{lavrentiev_solve, ErrorFunctionals, GammaGrid, RegularizationProblem};
use lavreg::linalg::uniform_sphere;
use lavreg::operator::{build_diagonal_operator, DenseOperator};
use lavreg::rate_lab::{fit_rate, harmonic_diagonal, SourceConditionWitness};
use lavreg::rules::{
    apriori_outcome, apriori_rule, md_discrepancy, md_rule, quasi_optimality_ratio, RegParam, DEFAULT_B0, DEFAULT_B1,
};
use lavreg::LavregError;
use nalgebra::DVector;
use proptest::prelude::*;

fn problem(n: usize, p: f64, delta: f64, seed: u64) -> (Arc<DenseOperator>, SourceConditionWitness, RegularizationProblem) {
    let op = Arc::new(harmonic_diagonal(n).unwrap());
    let w = SourceConditionWitness::seeded(&op, p, seed).unwrap();
    let prob = RegularizationProblem::new(op.clone(), w.u.clone(), delta, seed + 7).unwrap();
    (op, w, prob)
}

#[test]
fn md_lands_in_band_on_harmonic_spectrum() {
    for seed in 0..10 {
        let (op, _, prob) = problem(100, 1.0, 1e-3, seed);
        let out = md_rule(&op, &prob.f_noisy, 1e-3, DEFAULT_B0, DEFAULT_B1).unwrap();
        let g = out.gamma.finite().expect("finite γ");
        let d = md_discrepancy(&op, &prob.f_noisy, g).unwrap();
        assert!((DEFAULT_B0 * 1e-3..=DEFAULT_B1 * 1e-3).contains(&d), "seed {seed}: {d:e}");
        let direct = lavrentiev_solve(&op, g, &prob.f_noisy).unwrap();
        assert!((direct - &out.solution).norm() <= 1e-14 * out.solution.norm());
    }
}

#[test]
fn md_returns_infinity_for_small_data() {
    let op = harmonic_diagonal(10).unwrap();
    let f = uniform_sphere(10, 3) * 1e-4;
    let out = md_rule(&op, &f, 1e-4, DEFAULT_B0, DEFAULT_B1).unwrap();
    assert_eq!(out.gamma, RegParam::Infinite);
    assert_eq!(out.solution, DVector::zeros(10));
}

#[test]
fn md_rejects_band_below_m() {
    let op = harmonic_diagonal(10).unwrap();
    let f = uniform_sphere(10, 3);
    assert!(matches!(md_rule(&op, &f, 1e-3, 0.5, 2.0), Err(LavregError::InvalidParameter { .. })));
    assert!(matches!(md_rule(&op, &f, 1e-3, 1.5, 1.2), Err(LavregError::InvalidParameter { .. })));
}

#[test]
fn apriori_choice_has_expected_slope() {
    for p in [0.25, 0.5, 1.0] {
        let deltas: Vec<f64> = (0..12).map(|k| 10f64.powf(-1.0 - 0.5 * k as f64)).collect();
        let gammas: Vec<f64> = deltas.iter().map(|&d| apriori_rule(d, p, 0.7).unwrap()).collect();
        let fit = fit_rate(&deltas, &gammas).unwrap();
        assert!((fit.slope - 1.0 / (p + 1.0)).abs() <= 1e-12);
    }
    assert!(apriori_rule(1e-3, 1.5, 1.0).is_err());
}

#[test]
fn apriori_error_within_bias_plus_noise_bound() {
    let (op, w, prob) = problem(80, 0.5, 1e-4, 1);
    let out = apriori_outcome(&prob, 0.5, 1.0).unwrap();
    let g = out.gamma.finite().unwrap();
    let bias = lavrentiev_solve(&op, g, &prob.f_exact).unwrap() - &w.u;
    let err = (&out.solution - &w.u).norm();
    assert!(err <= (bias.norm() + 1e-4 / g) * (1.0 + 1e-12));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn md_choice_scales_with_operator(scale in 0.1f64..10.0, seed in 0u64..1000) {
        // A → sA, f → sf, δ → sδ: the band condition is invariant under γ → sγ
        let lambdas: Vec<f64> = (1..=30).map(|i| 1.0 / i as f64).collect();
        let scaled: Vec<f64> = lambdas.iter().map(|l| l * scale).collect();
        let op = build_diagonal_operator(&lambdas).unwrap();
        let ops = build_diagonal_operator(&scaled).unwrap();
        let f = op.apply(&uniform_sphere(30, seed)).unwrap() + uniform_sphere(30, seed + 1) * 1e-3;
        let g = md_rule(&op, &f, 1e-3, DEFAULT_B0, DEFAULT_B1).unwrap().gamma.finite().unwrap();
        let d_scaled = md_discrepancy(&ops, &(&f * scale), g * scale).unwrap();
        prop_assert!((d_scaled - scale * md_discrepancy(&op, &f, g).unwrap()).abs() <= 1e-10 * d_scaled);
        prop_assert!(d_scaled >= DEFAULT_B0 * 1e-3 * scale * (1.0 - 1e-10));
        prop_assert!(d_scaled <= DEFAULT_B1 * 1e-3 * scale * (1.0 + 1e-10));
    }

    #[test]
    fn md_discrepancy_monotone_in_gamma(seed in 0u64..1000) {
        let op = harmonic_diagonal(20).unwrap();
        let f = uniform_sphere(20, seed);
        let ds: Vec<f64> = (-8..=2).map(|k| md_discrepancy(&op, &f, 10f64.powi(k)).unwrap()).collect();
        prop_assert!(ds.windows(2).all(|w| w[1] >= w[0]));
    }
}

#[test]
fn md_error_shrinks_with_noise() {
    let deltas: Vec<f64> = (0..5).map(|k| 10f64.powi(-2 - k)).collect();
    let errors: Vec<f64> = deltas
        .iter()
        .map(|&d| {
            let (op, w, prob) = problem(150, 1.0, d, 3);
            let out = md_rule(&op, &prob.f_noisy, d, DEFAULT_B0, DEFAULT_B1).unwrap();
            (&out.solution - &w.u).norm()
        })
        .collect();
    let fit = fit_rate(&deltas, &errors).unwrap();
    assert!(fit.slope > 0.2, "slope {}", fit.slope);
}

#[test]
fn strong_ratio_dominates_weak_ratio() {
    let (op, w, prob) = problem(100, 1.0, 1e-3, 5);
    let grid = GammaGrid::full_range(&op).unwrap();
    let f = ErrorFunctionals::compute(&op, &w.u, 1e-3, &grid, None).unwrap();
    let out = md_rule(&op, &prob.f_noisy, 1e-3, DEFAULT_B0, DEFAULT_B1).unwrap();
    let q = quasi_optimality_ratio(&prob, &out, &f).unwrap();
    assert!(q.strong_ratio >= q.weak_ratio);
    assert!(q.weak_ratio.is_finite() && q.weak_ratio > 0.0);
}

#[test]
fn ratio_undefined_for_zero_solution() {
    let op = Arc::new(harmonic_diagonal(20).unwrap());
    let prob = RegularizationProblem::new(op.clone(), DVector::zeros(20), 1e-3, 1).unwrap();
    let grid = GammaGrid::full_range(&op).unwrap();
    let f = ErrorFunctionals::compute(&op, &prob.u_true, 1e-3, &grid, None).unwrap();
    let out = md_rule(&op, &prob.f_noisy, 1e-3, DEFAULT_B0, DEFAULT_B1).unwrap();
    assert!(matches!(quasi_optimality_ratio(&prob, &out, &f), Err(LavregError::UndefinedRatio(_))));
}
