//! Parameter choice strategies: the modified discrepancy (MD) rule, an
//! a-priori power rule and the balance rule, plus quasi-optimality ratios.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Serialize, Serializer};

use crate::error::{LavregError, Result};
use crate::lavrentiev::{balance_gamma, lavrentiev_solve, ErrorFunctionals, RegularizationProblem};
use crate::operator::DenseOperator;

pub const DEFAULT_B0: f64 = 1.5;
pub const DEFAULT_B1: f64 = 2.0;
const SCAN_FACTOR: f64 = 2.0;
const WINDOW_DECADES: f64 = 14.0;
const MAX_BISECTIONS: usize = 200;

/// A regularization parameter; `Infinite` stands for the zero solution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RegParam {
    Finite(f64),
    Infinite,
}

impl RegParam {
    pub fn finite(self) -> Option<f64> {
        match self {
            RegParam::Finite(g) => Some(g),
            RegParam::Infinite => None,
        }
    }
}

impl Serialize for RegParam {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            RegParam::Finite(g) => s.serialize_f64(*g),
            RegParam::Infinite => s.serialize_str("INFINITY"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    Md,
    Apriori,
    Balance,
}

#[derive(Clone, Debug, Serialize)]
pub struct ParameterChoiceOutcome {
    pub gamma: RegParam,
    pub solution: DVector<f64>,
    pub rule: Rule,
    pub diagnostics: BTreeMap<String, f64>,
}

/// `d(γ) = ‖γ(A + γI)⁻¹Δ_γ‖ = γ²‖(A + γI)⁻²f^δ‖`.
pub fn md_discrepancy(op: &DenseOperator, f_noisy: &DVector<f64>, gamma: f64) -> Result<f64> {
    let res = op.resolvent(gamma)?;
    let once = res.apply(f_noisy)?;
    Ok(gamma * gamma * res.apply(&once)?.norm())
}

/// Modified discrepancy rule: any `γ` with `b₀δ ≤ d(γ) ≤ b₁δ`, or `γ = ∞`
/// when `‖f^δ‖ ≤ b₁δ`. Geometric scan from `γ = ‖A‖` (down, or up if the
/// start is already below the band) followed by bisection on `log γ`.
pub fn md_rule(op: &DenseOperator, f_noisy: &DVector<f64>, delta: f64, b0: f64, b1: f64) -> Result<ParameterChoiceOutcome> {
    op.check_len(f_noisy)?;
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(LavregError::param("delta", format!("must be positive, got {delta}")));
    }
    let m = op.m_constant();
    if !(b0 > m) {
        return Err(LavregError::param("b0", format!("must exceed M = {m}, got {b0}")));
    }
    if !(b1 >= b0) {
        return Err(LavregError::param("b1", format!("must be >= b0 = {b0}, got {b1}")));
    }
    let mut diagnostics = BTreeMap::from([("b0".to_string(), b0), ("b1".to_string(), b1)]);
    let fnorm = f_noisy.norm();
    if fnorm <= b1 * delta {
        diagnostics.insert("discrepancy".into(), fnorm);
        diagnostics.insert("iterations".into(), 0.0);
        return Ok(ParameterChoiceOutcome {
            gamma: RegParam::Infinite,
            solution: DVector::zeros(op.dim()),
            rule: Rule::Md,
            diagnostics,
        });
    }
    let (lo_band, hi_band) = (b0 * delta, b1 * delta);
    let norm = op.norm().max(f64::MIN_POSITIVE);
    let (g_min, g_max) = (norm * 10f64.powf(-WINDOW_DECADES), norm * 10f64.powf(WINDOW_DECADES));
    let mut trace = Vec::new();
    let d = |g: f64| md_discrepancy(op, f_noisy, g);

    let mut g = norm;
    let mut v = d(g)?;
    trace.push((g, v));
    // bracket: `below` has d < b0δ, `above` has d > b1δ
    let (mut below, mut above);
    if v > hi_band {
        loop {
            let next = g / SCAN_FACTOR;
            if next < g_min {
                return Err(LavregError::window("MD band not entered on the downward scan", trace));
            }
            let nv = d(next)?;
            trace.push((next, nv));
            if nv <= hi_band {
                if nv >= lo_band {
                    return Ok(md_outcome(op, f_noisy, next, nv, trace.len(), diagnostics));
                }
                below = next.ln();
                above = g.ln();
                break;
            }
            g = next;
        }
    } else if v < lo_band {
        loop {
            let next = g * SCAN_FACTOR;
            if next > g_max {
                return Err(LavregError::window("MD band not entered on the upward scan", trace));
            }
            let nv = d(next)?;
            trace.push((next, nv));
            if nv >= lo_band {
                if nv <= hi_band {
                    return Ok(md_outcome(op, f_noisy, next, nv, trace.len(), diagnostics));
                }
                below = g.ln();
                above = next.ln();
                break;
            }
            g = next;
        }
    } else {
        return Ok(md_outcome(op, f_noisy, g, v, trace.len(), diagnostics));
    }
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (below + above);
        g = mid.exp();
        v = d(g)?;
        trace.push((g, v));
        if (lo_band..=hi_band).contains(&v) {
            return Ok(md_outcome(op, f_noisy, g, v, trace.len(), diagnostics));
        }
        if v < lo_band {
            below = mid;
        } else {
            above = mid;
        }
    }
    Err(LavregError::window("MD bisection did not land inside the band", trace))
}

fn md_outcome(
    op: &DenseOperator,
    f_noisy: &DVector<f64>,
    gamma: f64,
    discrepancy: f64,
    iterations: usize,
    mut diagnostics: BTreeMap<String, f64>,
) -> ParameterChoiceOutcome {
    diagnostics.insert("discrepancy".into(), discrepancy);
    diagnostics.insert("iterations".into(), iterations as f64);
    let solution = lavrentiev_solve(op, gamma, f_noisy).expect("resolvent evaluated during the search");
    ParameterChoiceOutcome {
        gamma: RegParam::Finite(gamma),
        solution,
        rule: Rule::Md,
        diagnostics,
    }
}

/// `γ = c δ^{1/(p+1)}`.
pub fn apriori_rule(delta: f64, p: f64, c: f64) -> Result<f64> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(LavregError::param("delta", format!("must be positive, got {delta}")));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(LavregError::param("p", format!("must lie in (0, 1], got {p}")));
    }
    if !(c > 0.0) || !c.is_finite() {
        return Err(LavregError::param("c", format!("must be positive, got {c}")));
    }
    Ok(c * delta.powf(1.0 / (p + 1.0)))
}

/// Solution for the a-priori choice `γ = c δ^{1/(p+1)}`.
pub fn apriori_outcome(problem: &RegularizationProblem, p: f64, c: f64) -> Result<ParameterChoiceOutcome> {
    let gamma = apriori_rule(problem.delta, p, c)?;
    let solution = lavrentiev_solve(&problem.operator, gamma, &problem.f_noisy)?;
    Ok(ParameterChoiceOutcome {
        gamma: RegParam::Finite(gamma),
        solution,
        rule: Rule::Apriori,
        diagnostics: BTreeMap::from([("c".to_string(), c), ("p".to_string(), p)]),
    })
}

/// Balance choice `γ̄²‖(A + γ̄I)⁻¹u‖ = δ` applied to the noisy data. It needs
/// the exact solution, so it is a benchmark rather than a practical rule.
pub fn balance_outcome(problem: &RegularizationProblem) -> Result<ParameterChoiceOutcome> {
    let gamma = balance_gamma(&problem.operator, &problem.u_true, problem.delta)?;
    let solution = lavrentiev_solve(&problem.operator, gamma, &problem.f_noisy)?;
    Ok(ParameterChoiceOutcome {
        gamma: RegParam::Finite(gamma),
        solution,
        rule: Rule::Balance,
        diagnostics: BTreeMap::from([("delta_over_gamma".to_string(), problem.delta / gamma)]),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct QuasiOptimality {
    pub error: f64,
    /// `‖u_γ^δ − u‖ / R_{δ,1}(u)`.
    pub weak_ratio: f64,
    /// `‖u_γ^δ − u‖ / p_lower`; overestimates the ratio to `P_δ(u)`.
    pub strong_ratio: f64,
}

pub fn quasi_optimality_ratio(
    problem: &RegularizationProblem,
    outcome: &ParameterChoiceOutcome,
    functionals: &ErrorFunctionals,
) -> Result<QuasiOptimality> {
    if (functionals.delta - problem.delta).abs() > 1e-12 * problem.delta {
        return Err(LavregError::InvalidInput(format!(
            "functionals computed for δ = {:e}, problem has δ = {:e}",
            functionals.delta, problem.delta
        )));
    }
    let error = (&outcome.solution - &problem.u_true).norm();
    if functionals.r1 <= 0.0 || functionals.p_lower <= 0.0 {
        return Err(LavregError::UndefinedRatio(format!(
            "r1 = {:e}, p_lower = {:e}",
            functionals.r1, functionals.p_lower
        )));
    }
    Ok(QuasiOptimality {
        error,
        weak_ratio: error / functionals.r1,
        strong_ratio: error / functionals.p_lower,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::build_diagonal_operator;
    use approx::assert_relative_eq;

    fn harmonic(n: usize) -> DenseOperator {
        build_diagonal_operator(&(1..=n).map(|i| 1.0 / i as f64).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn apriori_examples() {
        assert_relative_eq!(apriori_rule(1e-4, 1.0, 1.0).unwrap(), 1e-2, max_relative = 1e-14);
        assert_relative_eq!(apriori_rule(1e-6, 0.5, 2.0).unwrap(), 2e-4, max_relative = 1e-12);
        assert!(apriori_rule(1e-6, 1.5, 1.0).is_err());
        assert!(apriori_rule(1e-6, 0.0, 1.0).is_err());
    }

    #[test]
    fn md_small_data_gives_infinity() {
        let op = harmonic(5);
        let f = DVector::from_element(5, 1e-4);
        let out = md_rule(&op, &f, 1e-3, 1.5, 2.0).unwrap();
        assert_eq!(out.gamma, RegParam::Infinite);
        assert_eq!(out.solution, DVector::zeros(5));
        assert_eq!(serde_json::to_string(&out.gamma).unwrap(), "\"INFINITY\"");
    }

    #[test]
    fn md_rejects_b0_below_m() {
        let op = harmonic(5);
        let f = DVector::from_element(5, 1.0);
        assert!(matches!(md_rule(&op, &f, 1e-3, 0.5, 2.0), Err(LavregError::InvalidParameter { .. })));
        assert!(md_rule(&op, &f, 1e-3, 1.5, 1.2).is_err());
    }

    #[test]
    fn md_lands_in_band() {
        let n = 50;
        let op = harmonic(n);
        let w = crate::linalg::uniform_sphere(n, 11);
        let u = op.apply(&w).unwrap();
        let p = RegularizationProblem::new(std::sync::Arc::new(op), u, 1e-3, 5).unwrap();
        let out = md_rule(&p.operator, &p.f_noisy, 1e-3, 1.5, 2.0).unwrap();
        let g = out.gamma.finite().unwrap();
        let d = md_discrepancy(&p.operator, &p.f_noisy, g).unwrap();
        assert!((1.5e-3 * (1.0 - 1e-10)..=2e-3 * (1.0 + 1e-10)).contains(&d));
    }
}
