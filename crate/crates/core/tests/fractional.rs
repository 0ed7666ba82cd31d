use lavreg::fractional::{frac_power_matrix, neg_frac_power_apply, QuadratureSpec};
use lavreg::linalg::{spectral_norm, uniform_sphere};
use lavreg::operator::{build_abel_operator, build_diagonal_operator, build_integration_operator, DenseOperator};
use lavreg::rate_lab::fit_rate;

fn power(op: &DenseOperator, p: f64) -> nalgebra::DMatrix<f64> {
    let quad = QuadratureSpec::for_operator(op);
    frac_power_matrix(op, p, &quad).unwrap().operator.entries().clone()
}

#[test]
fn semigroup_on_diagonal_and_integration() {
    let lambdas: Vec<f64> = (0..24).map(|i| 10f64.powf(-4.0 * i as f64 / 23.0)).collect();
    let ops = [build_diagonal_operator(&lambdas).unwrap(), build_integration_operator(32).unwrap()];
    let exps = [0.25, 0.5, 0.75];
    for op in &ops {
        let norm = op.norm();
        for &p in &exps {
            for &q in &exps {
                if p + q > 1.0 {
                    continue;
                }
                let lhs = power(op, p) * power(op, q);
                let rhs = power(op, p + q);
                let defect = spectral_norm(&(lhs - rhs));
                assert!(defect <= 1e-5 * norm.powf(p + q), "{} p={p} q={q}: {defect:e}", op.label());
            }
        }
    }
}

#[test]
fn diagonal_oracle_over_exponent_grid() {
    let lambdas: Vec<f64> = (0..30).map(|i| 10f64.powf(-4.0 * i as f64 / 29.0)).collect();
    let op = build_diagonal_operator(&lambdas).unwrap();
    for k in 1..=10 {
        let p = 0.15 * k as f64;
        let m = power(&op, p);
        let scale = lambdas.iter().map(|l| l.powf(p)).fold(0.0, f64::max);
        for (i, l) in lambdas.iter().enumerate() {
            let err = (m[(i, i)] - l.powf(p)).abs();
            assert!(err <= 1e-8 * scale, "p={p} λ={l:e}: {err:e}");
        }
    }
}

#[test]
fn negative_power_round_trip_on_integration() {
    let op = build_integration_operator(32).unwrap();
    let u = op.apply(&uniform_sphere(32, 9)).unwrap();
    let quad = QuadratureSpec::for_operator(&op);
    let res = neg_frac_power_apply(&op, 0.3, &u, &quad).unwrap();
    let back = frac_power_matrix(&op, 0.3, &quad).unwrap().operator.apply(&res.w).unwrap();
    assert!((back - &u).norm() <= 1e-4 * u.norm());
}

/// Relative spectral distance between the quadrature power `V^α` and the
/// product-integration Abel matrix.
fn abel_gap(n: usize, alpha: f64) -> f64 {
    let v = build_integration_operator(n).unwrap();
    let abel = build_abel_operator(n, alpha).unwrap();
    spectral_norm(&(power(&v, alpha) - abel.entries())) / spectral_norm(abel.entries())
}

#[test]
fn abel_matrix_converges_to_fractional_power_of_integration() {
    let ns = [16, 32, 64, 128];
    for alpha in [0.3, 0.5, 0.7] {
        let gaps: Vec<f64> = ns.iter().map(|&n| abel_gap(n, alpha)).collect();
        assert!(gaps.windows(2).all(|w| w[1] < w[0]), "α={alpha}: {gaps:?}");
        let hs: Vec<f64> = ns.iter().map(|&n| 1.0 / n as f64).collect();
        let fit = fit_rate(&hs, &gaps).unwrap();
        assert!(fit.slope > 0.1, "α={alpha}: order {}", fit.slope);
    }
}

#[test]
fn abel_half_squared_is_integration() {
    let v = build_integration_operator(32).unwrap();
    let a = build_abel_operator(32, 0.5).unwrap();
    let gap = spectral_norm(&(a.entries() * a.entries() - v.entries()));
    assert!(gap <= 0.05 * spectral_norm(v.entries()));
}
