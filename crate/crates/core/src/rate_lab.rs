//! Convergence-order experiments: log-log rate fits for exact and noisy
//! data, saturation floors and the converse (rate ⇒ smoothness) probes.

use std::sync::Arc;

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{LavregError, Result};
use crate::fractional::{frac_power_matrix, neg_frac_power_apply, NegPowerDiagnostics, QuadratureSpec};
use crate::lavrentiev::{
    balance_gamma, bias_norms, q_delta_brackets, GammaGrid, RegularizationProblem,
};
use crate::linalg::{geometric_grid, uniform_sphere};
use crate::operator::{build_diagonal_operator, DenseOperator};
use crate::rules::{apriori_outcome, balance_outcome, md_rule, RegParam};

/// Round-trip tolerance (relative to `‖u‖`) for `A^q A^{-q} u = u`.
pub const ROUND_TRIP_TOL: f64 = 1e-3;
/// `max/min` of `‖(A + γI)⁻¹u‖` over the window below which it counts as bounded.
pub const BOUNDEDNESS_RATIO: f64 = 10.0;

/// Least-squares line through `(log x, log y)`.
#[derive(Clone, Debug, Serialize)]
pub struct RateFit {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    /// Largest absolute log-residual.
    pub max_residual: f64,
}

pub fn fit_rate(xs: &[f64], ys: &[f64]) -> Result<RateFit> {
    if xs.len() != ys.len() {
        return Err(LavregError::InvalidInput(format!("{} abscissae for {} values", xs.len(), ys.len())));
    }
    if xs.len() < 4 {
        return Err(LavregError::InvalidInput(format!("need at least 4 points, got {}", xs.len())));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(LavregError::InvalidInput("rate fit needs positive finite values".into()));
    }
    let increasing = xs.windows(2).all(|w| w[0] < w[1]);
    let decreasing = xs.windows(2).all(|w| w[0] > w[1]);
    if !(increasing || decreasing) {
        return Err(LavregError::InvalidInput("abscissae must be strictly monotone".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let max_residual = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (y - intercept - slope * x).abs())
        .fold(0.0, f64::max);
    Ok(RateFit {
        xs: xs.to_vec(),
        ys: ys.to_vec(),
        slope,
        intercept,
        max_residual,
    })
}

/// Source element `u = A^p w`.
#[derive(Clone, Debug, Serialize)]
pub struct SourceConditionWitness {
    pub p: f64,
    pub w: DVector<f64>,
    pub u: DVector<f64>,
}

impl SourceConditionWitness {
    pub fn new(op: &DenseOperator, p: f64, w: DVector<f64>, quad: &QuadratureSpec) -> Result<Self> {
        op.check_len(&w)?;
        let power = frac_power_matrix(op, p, quad)?;
        let u = power.operator.apply(&w)?;
        Ok(SourceConditionWitness { p, w, u })
    }

    /// `w` uniform on the unit sphere from `seed`.
    pub fn seeded(op: &DenseOperator, p: f64, seed: u64) -> Result<Self> {
        let quad = QuadratureSpec::for_operator(op);
        SourceConditionWitness::new(op, p, uniform_sphere(op.dim(), seed), &quad)
    }
}

/// `diag(1, 1/2, …, 1/n)`.
pub fn harmonic_diagonal(n: usize) -> Result<DenseOperator> {
    build_diagonal_operator(&(1..=n).map(|i| 1.0 / i as f64).collect::<Vec<_>>())
}

/// `diag(1, 1/2, 1/4, …, 2^{1-n})`.
pub fn exponential_diagonal(n: usize) -> Result<DenseOperator> {
    build_diagonal_operator(&(0..n).map(|i| 0.5f64.powi(i as i32)).collect::<Vec<_>>())
}

/// Eigenvalues geometric from `hi` down to `lo`. With sphere-uniform
/// witnesses its spectral measure has no preferred scale, so the rate
/// curves are straight lines in log-log over the whole interior window.
pub fn log_uniform_diagonal(n: usize, lo: f64, hi: f64) -> Result<DenseOperator> {
    if n < 2 || !(lo > 0.0 && hi > lo) {
        return Err(LavregError::param("spectrum", format!("need n >= 2 and 0 < lo < hi, got n={n}, [{lo:e}, {hi:e}]")));
    }
    let mut l = geometric_grid(lo, hi, n);
    l.reverse();
    build_diagonal_operator(&l)
}

/// Fit of `‖e_γ‖` against `γ`; slope ≈ `min(p, 1)` for `u ∈ R(A^p)`.
pub fn exact_data_rate(op: &DenseOperator, u: &DVector<f64>, grid: &GammaGrid) -> Result<RateFit> {
    let errs = bias_norms(op, u, grid)?;
    fit_rate(grid.points(), &errs)
}

#[derive(Clone, Debug, Serialize)]
pub struct SaturationProbe {
    /// `min ‖e_γ‖/γ` over the window.
    pub floor: f64,
    pub floor_gamma: f64,
    pub ratios: Vec<f64>,
    /// Fit of `‖e_γ‖/γ` against `γ`.
    pub trend: RateFit,
    /// The floor sits at an end of the window while the ratio still moves.
    pub window_limited: bool,
}

pub fn saturation_probe(op: &DenseOperator, u: &DVector<f64>, grid: &GammaGrid) -> Result<SaturationProbe> {
    if u.norm() == 0.0 {
        return Err(LavregError::param("u", "saturation probe needs u ≠ 0"));
    }
    let errs = bias_norms(op, u, grid)?;
    let ratios: Vec<f64> = errs.iter().zip(grid.points()).map(|(e, g)| e / g).collect();
    let k = argmin(&ratios);
    let trend = fit_rate(grid.points(), &ratios)?;
    Ok(SaturationProbe {
        floor: ratios[k],
        floor_gamma: grid.points()[k],
        window_limited: (k == 0 || k == ratios.len() - 1) && trend.slope.abs() > 0.05,
        ratios,
        trend,
    })
}

fn argmin(xs: &[f64]) -> usize {
    let mut k = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x < xs[k] {
            k = i;
        }
    }
    k
}

#[derive(Clone, Debug, Serialize)]
pub struct MembershipCheck {
    pub q: f64,
    /// `‖A^q w − u‖ / ‖u‖` with `w = A^{-q}u` at the default quadrature.
    pub round_trip_error: f64,
    /// Tail diagnostic with `s_min` at the bottom of the rate window.
    pub diagnostics: NegPowerDiagnostics,
    pub member: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConverseReport {
    pub exact_fit: RateFit,
    pub p_hat: f64,
    pub checks: Vec<MembershipCheck>,
    /// `‖(A + γI)⁻¹u‖` across the window, present when `p̂ ≈ 1`.
    pub resolvent_trace: Option<Vec<f64>>,
    pub resolvent_ratio: Option<f64>,
    pub bounded: Option<bool>,
}

/// Measures `p̂`, then tests `u ∈ R(A^q)` numerically on `q = 0.9p̂·k/5`
/// (`k = 1..5`) and on `extra_q`.
pub fn converse_probe(
    op: &DenseOperator,
    u: &DVector<f64>,
    extra_q: Option<f64>,
    grid: &GammaGrid,
    quad: &QuadratureSpec,
) -> Result<ConverseReport> {
    if let Some(q) = extra_q {
        if !(q > 0.0 && q < 1.0) {
            return Err(LavregError::param("q", format!("must lie in (0, 1), got {q}")));
        }
    }
    let exact_fit = exact_data_rate(op, u, grid)?;
    let p_hat = exact_fit.slope;
    let mut qs: Vec<f64> = (1..=5)
        .map(|k| 0.9 * p_hat * k as f64 / 5.0)
        .filter(|q| *q > 0.0 && *q < 1.0)
        .collect();
    if let Some(q) = extra_q {
        qs.push(q);
    }
    let windowed = quad.with_s_min(grid.min())?;
    let un = u.norm();
    let checks = qs
        .into_iter()
        .map(|q| {
            let w = neg_frac_power_apply(op, q, u, quad)?.w;
            let back = frac_power_matrix(op, q, quad)?.operator.apply(&w)?;
            let round_trip_error = (back - u).norm() / un;
            let diagnostics = neg_frac_power_apply(op, q, u, &windowed)?.diagnostics;
            let member = round_trip_error <= ROUND_TRIP_TOL && !diagnostics.source_condition_violated;
            Ok(MembershipCheck {
                q,
                round_trip_error,
                diagnostics,
                member,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut resolvent_trace, mut resolvent_ratio, mut bounded) = (None, None, None);
    if (p_hat - 1.0).abs() <= 0.1 {
        let trace: Vec<f64> = bias_norms(op, u, grid)?
            .iter()
            .zip(grid.points())
            .map(|(e, g)| e / g)
            .collect();
        let max = trace.iter().cloned().fold(f64::MIN, f64::max);
        let min = trace.iter().cloned().fold(f64::MAX, f64::min);
        let ratio = max / min;
        resolvent_ratio = Some(ratio);
        bounded = Some(ratio <= BOUNDEDNESS_RATIO);
        resolvent_trace = Some(trace);
    }
    Ok(ConverseReport {
        exact_fit,
        p_hat,
        checks,
        resolvent_trace,
        resolvent_ratio,
        bounded,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum NoisyRule {
    Md { b0: f64, b1: f64 },
    /// `γ = c δ^{1/(p+1)}` with `p` taken from the witness (capped at 1).
    Apriori { c: f64 },
    Balance,
    /// `q_upper`, an upper bound of `Q_δ(u) ≥ P_δ(u)`, on the given grid.
    FunctionalBound,
}

#[derive(Clone, Debug, Serialize)]
pub struct NoisyRateReport {
    pub rule: NoisyRule,
    /// `None` for `γ = ∞` or for the functional bound.
    pub gammas: Vec<Option<f64>>,
    pub errors: Vec<f64>,
    pub fit: RateFit,
}

/// Fits the realized error (seeded noise direction) or the functional
/// bound against `δ`; slope ≈ `p/(p+1)` for `p ≤ 1`.
pub fn noisy_rate(
    op: &Arc<DenseOperator>,
    witness: &SourceConditionWitness,
    deltas: &[f64],
    rule: NoisyRule,
    noise_seed: u64,
    grid: &GammaGrid,
) -> Result<NoisyRateReport> {
    if deltas.iter().any(|d| !(*d > 0.0)) {
        return Err(LavregError::param("deltas", "must be positive"));
    }
    if let NoisyRule::FunctionalBound = rule {
        let errors: Vec<f64> = q_delta_brackets(op, &witness.u, deltas, grid)?
            .iter()
            .map(|q| q.q_upper)
            .collect();
        let fit = fit_rate(deltas, &errors)?;
        return Ok(NoisyRateReport {
            rule,
            gammas: vec![None; deltas.len()],
            errors,
            fit,
        });
    }
    let mut gammas = Vec::with_capacity(deltas.len());
    let mut errors = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let problem = RegularizationProblem::new(op.clone(), witness.u.clone(), delta, noise_seed)?;
        let outcome = match rule {
            NoisyRule::Md { b0, b1 } => md_rule(op, &problem.f_noisy, delta, b0, b1)?,
            NoisyRule::Apriori { c } => apriori_outcome(&problem, witness.p.min(1.0), c)?,
            NoisyRule::Balance => balance_outcome(&problem)?,
            NoisyRule::FunctionalBound => unreachable!(),
        };
        gammas.push(match outcome.gamma {
            RegParam::Finite(g) => Some(g),
            RegParam::Infinite => None,
        });
        errors.push((&outcome.solution - &problem.u_true).norm());
    }
    let fit = fit_rate(deltas, &errors)?;
    Ok(NoisyRateReport {
        rule,
        gammas,
        errors,
        fit,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct NoisySaturationReport {
    pub deltas: Vec<f64>,
    pub gamma_bars: Vec<f64>,
    /// `δ/γ̄ = ‖u_γ̄ − u‖`, a lower bound of `P_δ(u)`.
    pub errors: Vec<f64>,
    pub fit: RateFit,
    /// `inf (δ/γ̄)/δ^{1/2}` over the δ grid.
    pub floor: f64,
    pub floor_delta: f64,
    /// `(δ/γ̄)/δ^{1/2}` keeps growing as `δ → 0` (slope below −0.25).
    pub ratio_unbounded: bool,
    pub window_limited: bool,
}

pub fn noisy_saturation_probe(op: &DenseOperator, u: &DVector<f64>, deltas: &[f64]) -> Result<NoisySaturationReport> {
    if u.norm() == 0.0 {
        return Err(LavregError::param("u", "saturation probe needs u ≠ 0"));
    }
    let gamma_bars = deltas
        .iter()
        .map(|&d| balance_gamma(op, u, d))
        .collect::<Result<Vec<_>>>()?;
    let errors: Vec<f64> = deltas.iter().zip(&gamma_bars).map(|(d, g)| d / g).collect();
    let fit = fit_rate(deltas, &errors)?;
    let ratios: Vec<f64> = errors.iter().zip(deltas).map(|(e, d)| e / d.sqrt()).collect();
    let k = argmin(&ratios);
    let ratio_slope = fit.slope - 0.5;
    Ok(NoisySaturationReport {
        deltas: deltas.to_vec(),
        floor: ratios[k],
        floor_delta: deltas[k],
        ratio_unbounded: ratio_slope < -0.25,
        window_limited: (k == 0 || k == ratios.len() - 1) && ratio_slope.abs() > 0.05,
        gamma_bars,
        errors,
        fit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn fit_exact_power() {
        let xs: Vec<f64> = (0..10).map(|k| 10f64.powi(-k)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x.sqrt()).collect();
        let f = fit_rate(&xs, &ys).unwrap();
        assert_relative_eq!(f.slope, 0.5, epsilon = 1e-12);
        assert!(f.max_residual <= 1e-12);
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x).collect();
        let f = fit_rate(&xs, &ys).unwrap();
        assert_relative_eq!(f.slope, 1.0, epsilon = 1e-12);
        assert_relative_eq!(f.intercept, 3f64.ln(), epsilon = 1e-10);
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(fit_rate(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(fit_rate(&[1.0, 2.0, 3.0, 4.0], &[1.0, 0.0, 3.0, 4.0]).is_err());
        assert!(fit_rate(&[1.0, 3.0, 2.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).is_err());
    }

    #[test]
    fn log_uniform_spectrum_is_descending() {
        let op = log_uniform_diagonal(5, 1e-4, 1.0).unwrap();
        let d = op.diagonal().unwrap();
        assert_eq!(d[0], 1.0);
        assert_eq!(d[4], 1e-4);
        assert!(d.as_slice().windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn saturation_rejects_zero() {
        let op = harmonic_diagonal(10).unwrap();
        let grid = GammaGrid::geometric(1e-3, 1.0, 5).unwrap();
        assert!(saturation_probe(&op, &DVector::zeros(10), &grid).is_err());
        assert!(noisy_saturation_probe(&op, &DVector::zeros(10), &[1e-3, 1e-4, 1e-5, 1e-6]).is_err());
    }
}
