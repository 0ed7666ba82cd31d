//! Lavrentiev regularization `u_γ^δ = (A + γI)⁻¹ f^δ`, its bias
//! `e_γ = −γ(A + γI)⁻¹u`, and the error functionals built from them:
//!
//! * `R_{δ,p}(u) = inf_γ ‖(‖e_γ‖, Mδ/γ)‖_p` for `p ∈ {1, 2, ∞}`;
//! * a bracket `p_lower ≤ P_δ(u) ≤ p_upper` for the maximal best possible
//!   error `P_δ(u) = sup_{‖Δ‖≤δ} inf_γ ‖e_γ + (A + γI)⁻¹Δ‖`;
//! * a bracket for `Q_δ(u)`, the same quantity with inf and sup swapped.
//!
//! Infima over `γ > 0` are taken on a [`GammaGrid`] and refined once by
//! golden-section search between the neighbours of the grid minimizer.

use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{LavregError, Result};
use crate::linalg::{geometric_grid, uniform_sphere};
use crate::operator::{DenseOperator, NULL_TOL};

/// Points per decade of the default working window.
pub const DEFAULT_PER_DECADE: usize = 60;
const GOLDEN_LOG_TOL: f64 = 1e-10;
const BALANCE_REL_TOL: f64 = 1e-10;
const BALANCE_LO: f64 = 1e-14;
const BALANCE_HI: f64 = 1e14;

/// Sorted, strictly increasing list of positive regularization parameters.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GammaGrid {
    points: Vec<f64>,
}

impl GammaGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(LavregError::param("grid", "must be nonempty"));
        }
        if points.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
            return Err(LavregError::param("grid", "points must be positive and finite"));
        }
        if points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LavregError::param("grid", "points must be strictly increasing"));
        }
        Ok(GammaGrid { points })
    }

    /// Geometric grid on `[lo, hi]` with `per_decade` points per decade.
    pub fn geometric(lo: f64, hi: f64, per_decade: usize) -> Result<Self> {
        if !(lo > 0.0 && hi > lo) || per_decade == 0 {
            return Err(LavregError::param("grid", format!("need 0 < lo < hi, got [{lo:e}, {hi:e}]")));
        }
        let count = ((hi / lo).log10() * per_decade as f64).ceil() as usize + 1;
        GammaGrid::new(geometric_grid(lo, hi, count.max(2)))
    }

    /// `[max(10 σ_min, 1e-8 ‖A‖), 10 ‖A‖]` at 60 points per decade. The lower
    /// cutoff keeps the finite-dimensional well-posed regime out of fits.
    pub fn working_window(op: &DenseOperator) -> Result<Self> {
        let norm = op.norm();
        let lo = (10.0 * op.sigma_min()).max(1e-8 * norm);
        GammaGrid::geometric(lo, 10.0 * norm, DEFAULT_PER_DECADE)
    }

    /// `[1e-10 ‖A‖, 10 ‖A‖]` at 30 points per decade, for infima over all
    /// `γ > 0` rather than rate fits.
    pub fn full_range(op: &DenseOperator) -> Result<Self> {
        let norm = op.norm();
        GammaGrid::geometric(1e-10 * norm, 10.0 * norm, 30)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn min(&self) -> f64 {
        self.points[0]
    }

    pub fn max(&self) -> f64 {
        *self.points.last().expect("nonempty grid")
    }

    /// Grid with extra points merged in.
    pub fn with_points(&self, extra: &[f64]) -> GammaGrid {
        let mut pts = self.points.clone();
        pts.extend(extra.iter().copied().filter(|g| *g > 0.0 && g.is_finite()));
        pts.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        pts.dedup();
        GammaGrid { points: pts }
    }
}

/// Discretized problem `Au = f` with perturbed data `‖f − f^δ‖ ≤ δ`.
#[derive(Clone, Debug)]
pub struct RegularizationProblem {
    pub operator: Arc<DenseOperator>,
    pub u_true: DVector<f64>,
    pub f_exact: DVector<f64>,
    pub delta: f64,
    pub f_noisy: DVector<f64>,
    /// Seed of the noise direction; `None` when the direction was supplied.
    pub noise_seed: Option<u64>,
}

impl RegularizationProblem {
    /// `f^δ = Au + δ d` with `d` uniform on the unit sphere (seeded).
    pub fn new(operator: Arc<DenseOperator>, u_true: DVector<f64>, delta: f64, noise_seed: u64) -> Result<Self> {
        let d = uniform_sphere(operator.dim(), noise_seed);
        let mut p = Self::with_noise_direction(operator, u_true, delta, &d)?;
        p.noise_seed = Some(noise_seed);
        Ok(p)
    }

    /// `f^δ = Au + δ d/‖d‖` for a given direction `d`.
    pub fn with_noise_direction(
        operator: Arc<DenseOperator>,
        u_true: DVector<f64>,
        delta: f64,
        direction: &DVector<f64>,
    ) -> Result<Self> {
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(LavregError::param("delta", format!("must be >= 0, got {delta}")));
        }
        operator.check_len(direction)?;
        let f_exact = operator.apply(&u_true)?;
        let dn = direction.norm();
        let f_noisy = if delta == 0.0 || dn == 0.0 {
            f_exact.clone()
        } else {
            &f_exact + direction * (delta / dn)
        };
        Ok(RegularizationProblem {
            operator,
            u_true,
            f_exact,
            delta,
            f_noisy,
            noise_seed: None,
        })
    }
}

/// `u_γ^δ = (A + γI)⁻¹ f`.
pub fn lavrentiev_solve(op: &DenseOperator, gamma: f64, f: &DVector<f64>) -> Result<DVector<f64>> {
    op.resolvent(gamma)?.apply(f)
}

/// `e_γ = −γ(A + γI)⁻¹u = u_γ − u` for exact data `f = Au`.
pub fn bias(op: &DenseOperator, gamma: f64, u: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(op.resolvent(gamma)?.apply(u)? * (-gamma))
}

/// `‖e_γ‖` at every grid point.
pub fn bias_norms(op: &DenseOperator, u: &DVector<f64>, grid: &GammaGrid) -> Result<Vec<f64>> {
    grid.points()
        .par_iter()
        .map(|&g| Ok(bias(op, g, u)?.norm()))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum PNorm {
    One,
    Two,
    Infinity,
}

impl PNorm {
    fn combine(self, a: f64, b: f64) -> f64 {
        match self {
            PNorm::One => a + b,
            PNorm::Two => a.hypot(b),
            PNorm::Infinity => a.max(b),
        }
    }
}

/// Result of minimizing a functional over `γ`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct GridMinimum {
    pub value: f64,
    pub gamma: f64,
    /// The grid minimizer sits at an end of the grid, so the true infimum
    /// may lie outside it.
    pub at_boundary: bool,
}

/// Grid minimum of `f` (smallest `γ` on ties) followed by golden-section
/// refinement in `log γ` between the neighbouring grid points.
pub fn minimize_over_grid<F>(grid: &GammaGrid, f: F) -> Result<GridMinimum>
where
    F: Fn(f64) -> Result<f64> + Sync,
{
    let pts = grid.points();
    let values: Vec<f64> = pts.par_iter().map(|&g| f(g)).collect::<Result<Vec<f64>>>()?;
    let mut k = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[k] {
            k = i;
        }
    }
    let at_boundary = k == 0 || k == pts.len() - 1;
    let mut best = GridMinimum {
        value: values[k],
        gamma: pts[k],
        at_boundary,
    };
    if pts.len() < 2 {
        return Ok(best);
    }
    let lo = pts[k.saturating_sub(1)].ln();
    let hi = pts[(k + 1).min(pts.len() - 1)].ln();
    let (g, v) = golden_section(lo, hi, |t| f(t.exp()))?;
    if v < best.value {
        best.value = v;
        best.gamma = g.exp();
    }
    Ok(best)
}

fn golden_section<F>(mut a: f64, mut b: f64, f: F) -> Result<(f64, f64)>
where
    F: Fn(f64) -> Result<f64>,
{
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    while (b - a).abs() > GOLDEN_LOG_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d)?;
        }
    }
    Ok(if fc <= fd { (c, fc) } else { (d, fd) })
}

/// `R_{δ,p}(u)`. For `u = 0` the infimum is approached as `γ → ∞`; the
/// result is `Mδ/γ_max` with `at_boundary` set.
pub fn r_delta(op: &DenseOperator, u: &DVector<f64>, delta: f64, p: PNorm, grid: &GammaGrid) -> Result<GridMinimum> {
    check_delta(delta)?;
    op.check_len(u)?;
    let m = op.m_constant();
    minimize_over_grid(grid, |g| {
        let e = bias(op, g, u)?.norm();
        Ok(p.combine(e, m * delta / g))
    })
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(LavregError::param("delta", format!("must be positive, got {delta}")));
    }
    Ok(())
}

fn in_nullspace(op: &DenseOperator, u: &DVector<f64>) -> Result<bool> {
    Ok(op.apply(u)?.norm() <= NULL_TOL * op.norm() * u.norm())
}

/// Unit vector `v = −φ_β`, `φ_β = (A + βI)⁻¹u / ‖(A + βI)⁻¹u‖`, with `‖Av‖ = ε`.
#[derive(Clone, Debug, Serialize)]
pub struct WorstCaseDirection {
    pub epsilon: f64,
    pub beta: f64,
    pub v: DVector<f64>,
    pub a_v_norm: f64,
    /// Set when `σ_min(A)` is not small against `ε`, i.e. the operator does
    /// not look non-surjective at this scale.
    pub window_warning: bool,
}

/// Finds `β(ε)` with `‖Aφ_β‖ = ε` by bisection on `log β`, using that
/// `‖Aφ_β‖` runs from (near) 0 to `‖Au‖/‖u‖` as `β` goes from 0 to ∞.
pub fn worst_case_direction(op: &DenseOperator, u: &DVector<f64>, epsilon: f64) -> Result<WorstCaseDirection> {
    op.check_len(u)?;
    let un = u.norm();
    if un == 0.0 {
        return Err(LavregError::param("u", "must be nonzero"));
    }
    if in_nullspace(op, u)? {
        return Err(LavregError::param("u", "lies in the nullspace of A"));
    }
    let ratio = op.apply(u)?.norm() / un;
    if !(epsilon > 0.0 && epsilon < ratio) {
        return Err(LavregError::param(
            "epsilon",
            format!("must lie in (0, ‖Au‖/‖u‖) = (0, {ratio:e}), got {epsilon:e}"),
        ));
    }
    let phi = |beta: f64| -> Result<(f64, DVector<f64>)> {
        let x = op.resolvent(beta)?.apply(u)?;
        let xn = x.norm();
        let x = x / xn;
        Ok((op.apply(&x)?.norm(), x))
    };
    let norm = op.norm();
    let (mut lo, mut hi) = ((1e-12 * norm).ln(), (1e12 * norm).ln());
    let (h_lo, _) = phi(lo.exp())?;
    let (h_hi, _) = phi(hi.exp())?;
    if !(h_lo < epsilon && h_hi > epsilon) {
        return Err(LavregError::window(
            format!("‖Aφ_β‖ = ε = {epsilon:e} not bracketed for β in [1e-12, 1e12]·‖A‖"),
            vec![(lo.exp(), h_lo), (hi.exp(), h_hi)],
        ));
    }
    let mut best = None;
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        let (h, x) = phi(mid.exp())?;
        let close = (h - epsilon).abs() <= 1e-10 * epsilon;
        best = Some((mid.exp(), h, x));
        if close || hi - lo < 1e-15 {
            break;
        }
        if h < epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (beta, _, phi_beta) = best.expect("at least one bisection step");
    let v = -phi_beta;
    let a_v_norm = op.apply(&v)?.norm();
    Ok(WorstCaseDirection {
        epsilon,
        beta,
        v,
        a_v_norm,
        window_warning: op.sigma_min() >= 0.1 * epsilon,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeFamily {
    /// `v_ε = −φ_{β(ε)}` with `‖Av_ε‖ = ε`.
    Epsilon,
    /// `−φ_β` on a fixed `β` scan; reaches below the smallest feasible `ε`.
    Beta,
    /// `±` the right singular vector of the smallest singular value of `A`.
    SmallestSingular,
}

#[derive(Clone, Debug, Serialize)]
pub struct DirectionProbe {
    pub family: ProbeFamily,
    /// `ε`, `β`, or the sign `±1`.
    pub parameter: f64,
    /// `min_γ ‖e_γ + δ(A + γI)⁻¹v‖`, absent when no direction was found.
    pub value: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PDeltaBracket {
    pub p_lower: f64,
    pub p_upper: f64,
    pub gamma_upper: f64,
    pub nullspace_case: bool,
    pub probes: Vec<DirectionProbe>,
}

const BETA_SCAN: usize = 29;

/// `ε`-sequence `{γ₀/2, γ₀/8, γ₀/32}` with `γ₀ < min(δ/(2 p_upper), 2‖Au‖/‖u‖)`.
pub fn default_epsilons(op: &DenseOperator, u: &DVector<f64>, delta: f64, p_upper: f64) -> Result<Vec<f64>> {
    let ratio = op.apply(u)?.norm() / u.norm();
    let gamma0 = 0.999 * (delta / (2.0 * p_upper)).min(2.0 * ratio);
    Ok(vec![gamma0 / 2.0, gamma0 / 8.0, gamma0 / 32.0])
}

/// Bracket for `P_δ(u)`: `p_upper = R_{δ,1}(u)`. Every unit `v` gives
/// `P_δ(u) ≥ inf_γ ‖e_γ + δ(A + γI)⁻¹v‖`; `p_lower` is the best such value
/// over the directions `v_ε` (one per `ε`), the `β` scan `−φ_β`,
/// `β ∈ [1e-12, 1e2]·‖A‖`, and `±` the bottom right singular vector of `A`,
/// together with the nullspace bound `‖u_N‖/M`. For `u ∈ N(A)`,
/// `p_lower = ‖u‖`.
pub fn p_delta_bracket(
    op: &DenseOperator,
    u: &DVector<f64>,
    delta: f64,
    grid: &GammaGrid,
    epsilons: Option<&[f64]>,
) -> Result<PDeltaBracket> {
    let upper = r_delta(op, u, delta, PNorm::One, grid)?;
    p_delta_bracket_with_upper(op, u, delta, grid, epsilons, upper)
}

fn p_delta_bracket_with_upper(
    op: &DenseOperator,
    u: &DVector<f64>,
    delta: f64,
    grid: &GammaGrid,
    epsilons: Option<&[f64]>,
    upper: GridMinimum,
) -> Result<PDeltaBracket> {
    let un = u.norm();
    let mut out = PDeltaBracket {
        p_lower: 0.0,
        p_upper: upper.value,
        gamma_upper: upper.gamma,
        nullspace_case: false,
        probes: Vec::new(),
    };
    if un == 0.0 {
        return Ok(out);
    }
    if in_nullspace(op, u)? {
        out.nullspace_case = true;
        out.p_lower = un;
        return Ok(out);
    }
    let null_part = crate::operator::range_null_decompose(op, u)
        .map(|d| d.u_null.norm() / op.m_constant())
        .unwrap_or(0.0);
    out.p_lower = null_part;
    let eps = match epsilons {
        Some(e) => e.to_vec(),
        None => default_epsilons(op, u, delta, upper.value)?,
    };
    let search = grid.with_points(&[upper.gamma]);
    let perturbed_min = |v: &DVector<f64>| -> Result<f64> {
        Ok(minimize_over_grid(&search, |g| {
            let res = op.resolvent(g)?;
            let e = res.apply(u)? * (-g);
            Ok((e + res.apply(v)? * delta).norm())
        })?
        .value)
    };
    let record = |out: &mut PDeltaBracket, family, parameter, value: Result<f64>| -> Result<()> {
        match value {
            Ok(v) => {
                out.p_lower = out.p_lower.max(v);
                out.probes.push(DirectionProbe {
                    family,
                    parameter,
                    value: Some(v),
                    error: None,
                });
                Ok(())
            }
            Err(err @ (LavregError::Window { .. } | LavregError::InvalidParameter { .. })) => {
                out.probes.push(DirectionProbe {
                    family,
                    parameter,
                    value: None,
                    error: Some(err.to_string()),
                });
                Ok(())
            }
            Err(err) => Err(err),
        }
    };
    for epsilon in eps {
        let value = worst_case_direction(op, u, epsilon).and_then(|dir| perturbed_min(&dir.v));
        record(&mut out, ProbeFamily::Epsilon, epsilon, value)?;
    }
    let norm = op.norm();
    for beta in geometric_grid(1e-12 * norm, 1e2 * norm, BETA_SCAN) {
        let value = op.resolvent(beta).and_then(|r| r.apply(u)).and_then(|x| {
            let xn = x.norm();
            let v = x / -xn;
            perturbed_min(&v)
        });
        record(&mut out, ProbeFamily::Beta, beta, value)?;
    }
    let z = smallest_right_singular_vector(op);
    for sign in [1.0, -1.0] {
        let value = perturbed_min(&(&z * sign));
        record(&mut out, ProbeFamily::SmallestSingular, sign, value)?;
    }
    Ok(out)
}

fn smallest_right_singular_vector(op: &DenseOperator) -> DVector<f64> {
    let n = op.dim();
    if let Some(d) = op.diagonal() {
        let k = d.iamin();
        return DVector::from_fn(n, |i, _| if i == k { 1.0 } else { 0.0 });
    }
    let svd = op.entries().clone().svd(false, true);
    let k = svd.singular_values.imin();
    let v_t = svd.v_t.expect("requested right singular vectors");
    v_t.row(k).transpose()
}

#[derive(Clone, Debug, Serialize)]
pub struct QDeltaBracket {
    pub q_lower: f64,
    pub q_upper: f64,
    pub gamma_lower: f64,
    pub gamma_upper: f64,
}

/// Bracket for `Q_δ(u) = inf_γ sup_{‖Δ‖≤δ} ‖e_γ + (A + γI)⁻¹Δ‖`. Per grid
/// point the inner supremum lies between the best of two trial
/// perturbations (top right singular vector of the resolvent, either sign,
/// and the direction `(A + γI)⁻ᵀe_γ`) and `‖e_γ‖ + δ‖(A + γI)⁻¹‖`.
pub fn q_delta_bracket(op: &DenseOperator, u: &DVector<f64>, delta: f64, grid: &GammaGrid) -> Result<QDeltaBracket> {
    Ok(q_delta_brackets(op, u, &[delta], grid)?.remove(0))
}

/// [`q_delta_bracket`] for several noise levels, sharing the per-`γ` work.
pub fn q_delta_brackets(
    op: &DenseOperator,
    u: &DVector<f64>,
    deltas: &[f64],
    grid: &GammaGrid,
) -> Result<Vec<QDeltaBracket>> {
    for &d in deltas {
        check_delta(d)?;
    }
    op.check_len(u)?;
    let per_point: Vec<Vec<(f64, f64)>> = grid
        .points()
        .par_iter()
        .map(|&g| inner_sup_brackets(op, u, deltas, g))
        .collect::<Result<Vec<_>>>()?;
    let pts = grid.points();
    Ok((0..deltas.len())
        .map(|j| {
            let (mut kl, mut ku) = (0, 0);
            for (i, row) in per_point.iter().enumerate() {
                if row[j].0 < per_point[kl][j].0 {
                    kl = i;
                }
                if row[j].1 < per_point[ku][j].1 {
                    ku = i;
                }
            }
            QDeltaBracket {
                q_lower: per_point[kl][j].0,
                q_upper: per_point[ku][j].1,
                gamma_lower: pts[kl],
                gamma_upper: pts[ku],
            }
        })
        .collect())
}

/// Lower and upper bound for `sup_{‖Δ‖≤δ} ‖e_γ + (A + γI)⁻¹Δ‖` at one `γ`.
pub fn inner_sup_bracket(op: &DenseOperator, u: &DVector<f64>, delta: f64, gamma: f64) -> Result<(f64, f64)> {
    Ok(inner_sup_brackets(op, u, &[delta], gamma)?[0])
}

fn inner_sup_brackets(op: &DenseOperator, u: &DVector<f64>, deltas: &[f64], gamma: f64) -> Result<Vec<(f64, f64)>> {
    let res = op.resolvent(gamma)?;
    let e = res.apply(u)? * (-gamma);
    let (sigma, z) = res.top_singular()?;
    let rz = res.apply(&z)?;
    let aligned = res.apply_transpose(&e)?;
    let an = aligned.norm();
    let ra = if an > 0.0 { Some(res.apply(&(aligned / an))?) } else { None };
    Ok(deltas
        .iter()
        .map(|&delta| {
            let upper = e.norm() + delta * sigma;
            let mut lower = (&e + &rz * delta).norm().max((&e - &rz * delta).norm());
            if let Some(ra) = &ra {
                lower = lower.max((&e + ra * delta).norm());
            }
            (lower.min(upper), upper)
        })
        .collect())
}

/// All error functionals of `(u, δ)` on a common set of `γ` values: the grid
/// plus the refined minimizers of `R_{δ,1}`, `R_{δ,2}`, `R_{δ,∞}`.
#[derive(Clone, Debug, Serialize)]
pub struct ErrorFunctionals {
    pub delta: f64,
    pub gamma_grid: Vec<f64>,
    pub bias_norms: Vec<f64>,
    pub r1: f64,
    pub r2: f64,
    pub r_inf: f64,
    pub gamma_r1: f64,
    pub gamma_r2: f64,
    pub gamma_r_inf: f64,
    pub p_lower: f64,
    pub p_upper: f64,
    pub q_lower: f64,
    pub q_upper: f64,
    pub p_bracket: PDeltaBracket,
    pub grid_truncated: bool,
}

impl ErrorFunctionals {
    pub fn compute(
        op: &DenseOperator,
        u: &DVector<f64>,
        delta: f64,
        grid: &GammaGrid,
        epsilons: Option<&[f64]>,
    ) -> Result<Self> {
        check_delta(delta)?;
        op.check_len(u)?;
        let refined: Vec<GridMinimum> = [PNorm::One, PNorm::Two, PNorm::Infinity]
            .iter()
            .map(|&p| r_delta(op, u, delta, p, grid))
            .collect::<Result<_>>()?;
        let common = grid.with_points(&refined.iter().map(|m| m.gamma).collect::<Vec<_>>());
        let norms = bias_norms(op, u, &common)?;
        let m = op.m_constant();
        let pick = |p: PNorm| {
            let mut best = (f64::INFINITY, 0.0);
            for (&g, &e) in common.points().iter().zip(&norms) {
                let v = p.combine(e, m * delta / g);
                if v < best.0 {
                    best = (v, g);
                }
            }
            best
        };
        let (r1, gamma_r1) = pick(PNorm::One);
        let (r2, gamma_r2) = pick(PNorm::Two);
        let (r_inf, gamma_r_inf) = pick(PNorm::Infinity);
        let upper = GridMinimum {
            value: r1,
            gamma: gamma_r1,
            at_boundary: refined[0].at_boundary,
        };
        let p_bracket = p_delta_bracket_with_upper(op, u, delta, &common, epsilons, upper)?;
        let q = q_delta_bracket(op, u, delta, &common)?;
        let grid_points = grid.points().to_vec();
        let grid_norms = bias_norms(op, u, grid)?;
        Ok(ErrorFunctionals {
            delta,
            gamma_grid: grid_points,
            bias_norms: grid_norms,
            r1,
            r2,
            r_inf,
            gamma_r1,
            gamma_r2,
            gamma_r_inf,
            p_lower: p_bracket.p_lower,
            p_upper: p_bracket.p_upper,
            q_lower: q.q_lower,
            q_upper: q.q_upper,
            grid_truncated: refined.iter().any(|r| r.at_boundary),
            p_bracket,
        })
    }
}

/// `γ̄` with `γ̄² ‖(A + γ̄I)⁻¹u‖ = δ`, by bisection on `log γ` over
/// `[1e-14, 1e14]`. The left side is strictly increasing for accretive `A`.
pub fn balance_gamma(op: &DenseOperator, u: &DVector<f64>, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    op.check_len(u)?;
    if u.norm() == 0.0 {
        return Err(LavregError::param("u", "must be nonzero"));
    }
    if !op.is_accretive() {
        return Err(LavregError::param("operator", "balance rule needs an accretive operator"));
    }
    let f = |g: f64| -> Result<f64> { Ok(g * g * op.resolvent(g)?.apply(u)?.norm()) };
    let (mut lo, mut hi) = (BALANCE_LO.ln(), BALANCE_HI.ln());
    let (f_lo, f_hi) = (f(BALANCE_LO)?, f(BALANCE_HI)?);
    if !(f_lo <= delta && f_hi >= delta) {
        return Err(LavregError::window(
            format!("balance root for δ = {delta:e} outside [1e-14, 1e14]"),
            vec![(BALANCE_LO, f_lo), (BALANCE_HI, f_hi)],
        ));
    }
    let mut trace = Vec::new();
    for _ in 0..600 {
        let mid = 0.5 * (lo + hi);
        let g = mid.exp();
        let v = f(g)?;
        if (v - delta).abs() <= BALANCE_REL_TOL * delta {
            return Ok(g);
        }
        trace.push((g, v));
        if v < delta {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-16 {
            break;
        }
    }
    Err(LavregError::window(
        format!("balance bisection stalled before reaching relative tolerance {BALANCE_REL_TOL:e}"),
        trace,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::{build_diagonal_operator, build_integration_operator};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn dv(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn solve_examples() {
        let id = DenseOperator::from_matrix(DMatrix::identity(2, 2), 1.0, "I").unwrap();
        assert_eq!(lavrentiev_solve(&id, 1.0, &dv(&[2.0, 2.0])).unwrap(), dv(&[1.0, 1.0]));
        let d = build_diagonal_operator(&[1.0, 0.0]).unwrap();
        assert_eq!(lavrentiev_solve(&d, 0.5, &dv(&[3.0, 1.0])).unwrap(), dv(&[2.0, 2.0]));
    }

    #[test]
    fn bias_of_nullspace_vector_is_minus_u() {
        let d = build_diagonal_operator(&[1.0, 0.0]).unwrap();
        let u = dv(&[0.0, 3.0]);
        for g in [1e-6, 1e-2, 1.0, 1e4] {
            let e = bias(&d, g, &u).unwrap();
            assert!((e + &u).norm() <= 1e-15 * u.norm());
        }
    }

    #[test]
    fn bias_diagonal_closed_form() {
        let lambdas = [1.0, 0.3, 0.01];
        let d = build_diagonal_operator(&lambdas).unwrap();
        let u = dv(&[1.0, -2.0, 0.5]);
        let e = bias(&d, 0.2, &u).unwrap();
        for i in 0..3 {
            assert_relative_eq!(e[i], -0.2 * u[i] / (lambdas[i] + 0.2), max_relative = 1e-15);
        }
    }

    #[test]
    fn grid_validation() {
        assert!(GammaGrid::new(vec![]).is_err());
        assert!(GammaGrid::new(vec![1.0, 1.0]).is_err());
        assert!(GammaGrid::new(vec![0.0, 1.0]).is_err());
        let g = GammaGrid::geometric(1e-3, 1e-1, 10).unwrap();
        assert_eq!(g.points().len(), 21);
    }

    #[test]
    fn r_delta_of_zero_is_truncated() {
        let d = build_diagonal_operator(&[1.0, 0.5]).unwrap();
        let grid = GammaGrid::geometric(1e-3, 1e2, 10).unwrap();
        let r = r_delta(&d, &DVector::zeros(2), 0.01, PNorm::One, &grid).unwrap();
        assert!(r.at_boundary);
        assert_relative_eq!(r.value, 0.01 / 1e2, max_relative = 1e-12);
    }

    #[test]
    fn balance_on_identity() {
        let id = build_diagonal_operator(&[1.0, 1.0]).unwrap();
        let u = dv(&[1.0, 0.0]);
        let g = balance_gamma(&id, &u, 0.5).unwrap();
        assert_relative_eq!(g, 1.0, max_relative = 1e-9);
        assert!(balance_gamma(&id, &DVector::zeros(2), 0.5).is_err());
    }

    #[test]
    fn worst_case_direction_preconditions() {
        let d = build_diagonal_operator(&[1.0, 0.1, 0.0]).unwrap();
        let u = dv(&[1.0, 1.0, 0.0]);
        let ratio = d.apply(&u).unwrap().norm() / u.norm();
        assert!(worst_case_direction(&d, &u, ratio).is_err());
        assert!(worst_case_direction(&d, &u, 0.0).is_err());
        assert!(worst_case_direction(&d, &dv(&[0.0, 0.0, 1.0]), 0.1).is_err());
        let w = worst_case_direction(&d, &u, 0.2).unwrap();
        assert_relative_eq!(w.v.norm(), 1.0, max_relative = 1e-12);
        assert_relative_eq!(w.a_v_norm, 0.2, max_relative = 1e-8);
    }

    #[test]
    fn integration_worst_case_direction() {
        let op = build_integration_operator(64).unwrap();
        let u = DVector::from_fn(64, |i, _| ((i as f64 + 0.5) / 64.0).powi(2));
        let w = worst_case_direction(&op, &u, 1e-3);
        // σ_min of the n=64 discretization lies above 1e-3, so the floor
        // lim_{β→0} ‖Aφ_β‖ = ‖u‖/‖A⁻¹u‖ may exceed ε.
        if let Ok(w) = w {
            assert_relative_eq!(w.a_v_norm, 1e-3, max_relative = 1e-8);
        }
    }
}
