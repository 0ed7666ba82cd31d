//! Fractional powers `A^p` and negative powers `A^{-q}u` of nonnegative
//! operators via the Balakrishnan–Kato integrals
//!
//! ```text
//! A^q    = (sin πq / π) ∫₀^∞ s^{q-1} (A + sI)⁻¹ A ds,   0 < q < 1
//! A^{-q} = (sin πq / π) ∫₀^∞ s^{-q}  (A + sI)⁻¹   ds,   0 < q < 1
//! ```
//!
//! The integrals are split at `s_min` and `s_max`. The middle part is
//! integrated in `t = ln s` with tanh-sinh nodes on `[ln s_min, ln s_max]`.
//! Below `s_min` the resolvent is replaced by its first-order Taylor
//! polynomial about `s_min` (relative error `O((s_min/σ_min)²)`); above
//! `s_max` by `s⁻¹` (relative error `O(‖A‖/s_max)`).
//!
//! The rule is evaluated at step `h` and at `h/2` (nested nodes); the finer
//! value is returned and the difference is the truncation estimate.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LavregError, Result};
use crate::operator::{DenseOperator, Resolvent, Structure};

/// Relative truncation threshold above which a warning is attached.
pub const FRAC_TOL: f64 = 1e-8;
pub const DEFAULT_NODE_COUNT: usize = 200;
/// Growth exponent of the small-s integrand above which `A^{-q}u` is
/// treated as nonexistent (integrand grows faster than `s^{-1+0.01}`).
pub const DIVERGENCE_EXPONENT: f64 = 0.99;

const TAU_MAX: f64 = 3.0;
const TAIL_PROBES: usize = 5;
const TAIL_PROBE_SPAN: f64 = 100.0;
const CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuadratureRule {
    #[serde(rename = "tanh-sinh-on-log-axis")]
    TanhSinhOnLogAxis,
}

/// `(s, weight)` pairs.
type Nodes = Vec<(f64, f64)>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub node_count: usize,
    pub s_min: f64,
    pub s_max: f64,
    pub rule: QuadratureRule,
}

impl QuadratureSpec {
    pub fn new(node_count: usize, s_min: f64, s_max: f64) -> Result<Self> {
        if node_count < 3 {
            return Err(LavregError::param("node_count", "must be at least 3"));
        }
        if !(s_min > 0.0 && s_max > s_min && s_max.is_finite()) {
            return Err(LavregError::param("s_min/s_max", format!("need 0 < s_min < s_max, got {s_min:e}, {s_max:e}")));
        }
        Ok(QuadratureSpec {
            node_count,
            s_min,
            s_max,
            rule: QuadratureRule::TanhSinhOnLogAxis,
        })
    }

    /// Default settings for `op`: `s_min = 1e-10‖A‖` (lowered to
    /// `1e-3 σ_min` when the spectrum reaches further down), `s_max = 1e8‖A‖`.
    /// The node count grows with the covered log range beyond 18 decades.
    pub fn for_operator(op: &DenseOperator) -> Self {
        let norm = op.norm().max(f64::MIN_POSITIVE);
        let mut s_min = 1e-10 * norm;
        let sigma_min = op.sigma_min();
        if sigma_min > 0.0 {
            s_min = s_min.min(1e-3 * sigma_min);
        }
        let s_max = 1e8 * norm;
        let decades = (s_max / s_min).log10();
        let node_count = DEFAULT_NODE_COUNT.max((DEFAULT_NODE_COUNT as f64 * decades / 18.0).ceil() as usize);
        QuadratureSpec {
            node_count,
            s_min,
            s_max,
            rule: QuadratureRule::TanhSinhOnLogAxis,
        }
    }

    /// Same rule with a different lower cutoff.
    pub fn with_s_min(&self, s_min: f64) -> Result<Self> {
        QuadratureSpec::new(self.node_count, s_min, self.s_max)
    }

    /// `(s, w)` pairs such that `Σ w g(s) ≈ ∫_{s_min}^{s_max} g(s) ds`, for the
    /// coarse level and for the midpoints that refine it to step `h/2`.
    fn nodes(&self) -> (Nodes, Nodes) {
        let half = (self.node_count.max(3) - 1) / 2;
        let h = TAU_MAX / half as f64;
        let (a, b) = (self.s_min.ln(), self.s_max.ln());
        let (c, d) = (0.5 * (a + b), 0.5 * (b - a));
        let node = |tau: f64| {
            let arg = 0.5 * PI * tau.sinh();
            let x = arg.tanh();
            let dx = 0.5 * PI * tau.cosh() / arg.cosh().powi(2);
            let t = c + d * x;
            let s = t.exp();
            (s, h * d * dx * s)
        };
        let coarse = (-(half as i64)..=half as i64).map(|k| node(k as f64 * h)).collect();
        let mid = (-(half as i64)..half as i64).map(|k| node((k as f64 + 0.5) * h)).collect();
        (coarse, mid)
    }
}

/// `A^p` together with the quadrature truncation estimate.
#[derive(Clone, Debug)]
pub struct FractionalPower {
    pub operator: DenseOperator,
    pub truncation_estimate: f64,
    pub warning: Option<String>,
}

/// Diagnostics of [`neg_frac_power_apply`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NegPowerDiagnostics {
    /// Probe abscissae, increasing, spanning two decades above `s_min`.
    pub tail_s: Vec<f64>,
    /// `‖s^{-q}(A + sI)⁻¹u‖` at `tail_s`.
    pub tail_integrand_norms: Vec<f64>,
    /// `-d log‖integrand‖ / d log s` fitted over the probes.
    pub tail_growth_exponent: f64,
    pub source_condition_violated: bool,
    pub truncation_estimate: f64,
}

#[derive(Clone, Debug)]
pub struct NegPowerResult {
    pub w: DVector<f64>,
    pub diagnostics: NegPowerDiagnostics,
}

fn check_operator(op: &DenseOperator) -> Result<()> {
    if op.m_constant() < 1.0 {
        return Err(LavregError::param("operator", "not certified"));
    }
    Ok(())
}

/// Integer power by repeated multiplication; `A^0 = I`.
pub fn integer_power(op: &DenseOperator, k: u32) -> DMatrix<f64> {
    let n = op.dim();
    let mut out = DMatrix::identity(n, n);
    for _ in 0..k {
        out = match op.structure() {
            Structure::Diagonal => {
                let d = op.entries().diagonal();
                DMatrix::from_diagonal(&out.diagonal().component_mul(&d))
            }
            _ => op.entries() * &out,
        };
    }
    out
}

/// Sums `f` over the nodes in fixed-size chunks: chunks may run in parallel,
/// partial sums are combined in node order.
fn weighted_sum<T, F>(nodes: &[(f64, f64)], zero: &T, f: F) -> Result<T>
where
    T: Clone + Send + Sync + std::ops::AddAssign<T> + std::ops::Mul<f64, Output = T>,
    F: Fn(f64) -> Result<T> + Sync,
{
    let partials: Vec<T> = nodes
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = zero.clone();
            for &(s, w) in chunk {
                acc += f(s)? * w;
            }
            Ok(acc)
        })
        .collect::<Result<Vec<T>>>()?;
    let mut total = zero.clone();
    for p in partials {
        total += p;
    }
    Ok(total)
}

fn resolvent_times_a(op: &DenseOperator, res: &Resolvent<'_>) -> Result<DMatrix<f64>> {
    match op.structure() {
        Structure::Diagonal => {
            let d = op.entries().diagonal();
            let g = res.gamma();
            Ok(DMatrix::from_diagonal(&d.map(|l| l / (l + g))))
        }
        _ => res.apply_matrix(op.entries()),
    }
}

fn fractional_part_matrix(op: &DenseOperator, q: f64, quad: &QuadratureSpec) -> Result<(DMatrix<f64>, f64)> {
    let n = op.dim();
    let zero = DMatrix::zeros(n, n);
    let (coarse, mid) = quad.nodes();
    let integrand = |s: f64| -> Result<DMatrix<f64>> {
        let res = op.resolvent(s)?;
        Ok(resolvent_times_a(op, &res)? * s.powf(q - 1.0))
    };
    let coarse_sum = weighted_sum(&coarse, &zero, integrand)?;
    let mid_sum = weighted_sum(&mid, &zero, integrand)?;
    let fine_sum = (&coarse_sum + &mid_sum) * 0.5;

    let s0 = quad.s_min;
    let res0 = op.resolvent(s0)?;
    let ra = resolvent_times_a(op, &res0)?;
    let low = res0.apply_matrix(&ra)? * (s0.powf(q + 1.0) / (q * (q + 1.0))) + ra * (s0.powf(q) / q);
    let high = op.entries() * (quad.s_max.powf(q - 1.0) / (1.0 - q));
    let c = (PI * q).sin() / PI;
    let fine = (&fine_sum + &low + &high) * c;
    let coarse_total = (&coarse_sum + &low + &high) * c;
    let scale = fine.amax().max(f64::MIN_POSITIVE);
    Ok((fine.clone(), (fine - coarse_total).amax() / scale))
}

/// `A^p` for `p > 0`: `A^{p-⌊p⌋} A^{⌊p⌋}`, with the fractional factor from
/// quadrature. Integer `p` takes the exact product path.
pub fn frac_power_matrix(op: &DenseOperator, p: f64, quad: &QuadratureSpec) -> Result<FractionalPower> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(LavregError::param("p", format!("must be positive, got {p}")));
    }
    check_operator(op)?;
    let whole = p.floor();
    let q = p - whole;
    let integer = integer_power(op, whole as u32);
    let label = format!("{}^{p}", op.label());
    if q == 0.0 {
        let out = DenseOperator::from_matrix(integer, op.m_constant(), label)?
            .with_accretive_flag(whole <= 1.0 && op.is_accretive());
        return Ok(FractionalPower {
            operator: out,
            truncation_estimate: 0.0,
            warning: None,
        });
    }
    let (frac, estimate) = fractional_part_matrix(op, q, quad)?;
    let entries = if whole == 0.0 { frac } else { frac * integer };
    let mut out = DenseOperator::from_matrix(entries, op.m_constant(), label)?;
    if let Some(h) = op.grid_step() {
        out = out.with_grid_step(h);
    }
    out = out.with_accretive_flag(whole == 0.0 && op.is_accretive());
    let warning = (estimate > FRAC_TOL)
        .then(|| format!("quadrature truncation estimate {estimate:.2e} exceeds {FRAC_TOL:e}"));
    Ok(FractionalPower {
        operator: out,
        truncation_estimate: estimate,
        warning,
    })
}

/// `w ≈ A^{-q}u` for `0 < q < 1`, with the small-s growth diagnostic.
///
/// When the integrand `s^{-q}(A + sI)⁻¹u` grows faster than `s^{-0.99}` over
/// the two decades above `quad.s_min`, the integral is treated as divergent
/// and `source_condition_violated` is set; `w` is still returned.
pub fn neg_frac_power_apply(
    op: &DenseOperator,
    q: f64,
    u: &DVector<f64>,
    quad: &QuadratureSpec,
) -> Result<NegPowerResult> {
    if !(q > 0.0 && q < 1.0) {
        return Err(LavregError::param("q", format!("must lie in (0, 1), got {q}")));
    }
    check_operator(op)?;
    op.check_len(u)?;
    let n = op.dim();
    let zero = DVector::zeros(n);
    let (coarse, mid) = quad.nodes();
    let integrand = |s: f64| -> Result<DVector<f64>> { Ok(op.resolvent(s)?.apply(u)? * s.powf(-q)) };
    let coarse_sum = weighted_sum(&coarse, &zero, integrand)?;
    let mid_sum = weighted_sum(&mid, &zero, integrand)?;
    let fine_sum = (&coarse_sum + &mid_sum) * 0.5;

    let s0 = quad.s_min;
    let res0 = op.resolvent(s0)?;
    let r0u = res0.apply(u)?;
    let low = res0.apply(&r0u)? * (s0.powf(2.0 - q) / ((1.0 - q) * (2.0 - q))) + r0u * (s0.powf(1.0 - q) / (1.0 - q));
    let high = u * (quad.s_max.powf(-q) / q);
    let c = (PI * q).sin() / PI;
    let w = (&fine_sum + &low + &high) * c;
    let coarse_w = (&coarse_sum + &low + &high) * c;
    let truncation_estimate = (&w - coarse_w).norm() / w.norm().max(f64::MIN_POSITIVE);

    let tail_s = crate::linalg::geometric_grid(quad.s_min, quad.s_min * TAIL_PROBE_SPAN, TAIL_PROBES);
    let tail_integrand_norms = tail_s
        .iter()
        .map(|&s| Ok(integrand(s)?.norm()))
        .collect::<Result<Vec<f64>>>()?;
    let tail_growth_exponent = -log_log_slope(&tail_s, &tail_integrand_norms);
    let diagnostics = NegPowerDiagnostics {
        source_condition_violated: tail_growth_exponent > DIVERGENCE_EXPONENT,
        tail_s,
        tail_integrand_norms,
        tail_growth_exponent,
        truncation_estimate,
    };
    Ok(NegPowerResult { w, diagnostics })
}

fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.max(f64::MIN_POSITIVE).ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}
