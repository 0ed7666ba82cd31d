//! Discretized nonnegative operators, their resolvents `(A + γI)⁻¹`, and the
//! splitting of a vector into its range-closure and nullspace components.
//!
//! Every operator carries a constant `M ≥ 1` for which `‖(A + γI)⁻¹‖ ≤ M/γ`
//! holds on the certification grid. Operators with a positive semidefinite
//! symmetric part (accretive operators) are certified with `M = 1`.
//!
//! Resolvent solves dispatch on the matrix structure: diagonal operators are
//! solved componentwise, lower-triangular ones (the integration and Abel
//! discretizations) by forward substitution, and anything else by LU.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, LU, SVD};
use serde::Serialize;

use crate::error::{LavregError, Result};
use crate::format::fmt_g17;
use crate::linalg::{geometric_grid, is_diagonal, is_lower_triangular};

/// Relative tolerance of the nonnegativity certificate.
pub const CERT_TOL: f64 = 1e-8;
/// Absolute slack for the smallest eigenvalue of the symmetric part.
pub const ACC_TOL: f64 = 1e-10;
/// Singular values below `NULL_TOL · σ_max` count as zero.
pub const NULL_TOL: f64 = 1e-10;
/// Target relative residual of a resolvent solve.
pub const RESIDUAL_TOL: f64 = 1e-12;

const CERT_GRID_LO: f64 = 1e-6;
const CERT_GRID_HI: f64 = 1e3;
const CERT_GRID_POINTS: usize = 25;
const LANCZOS_REL_TOL: f64 = 1e-12;
const LANCZOS_MAX_STEPS: usize = 400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Diagonal,
    LowerTriangular,
    Dense,
}

#[derive(Clone, Copy, Debug, Serialize)]
struct SingularSummary {
    max: f64,
    min: f64,
}

/// An n×n real matrix together with its certified nonnegativity constant.
#[derive(Clone, Debug)]
pub struct DenseOperator {
    entries: DMatrix<f64>,
    m_constant: f64,
    label: String,
    grid_step: Option<f64>,
    accretive: bool,
    structure: Structure,
    singular: OnceLock<SingularSummary>,
}

/// Outcome of [`DenseOperator::certify`].
#[derive(Clone, Debug, Serialize)]
pub struct Certificate {
    pub m_constant: f64,
    /// Smallest eigenvalue of `(A + Aᵀ)/2`.
    pub symmetric_part_min_eigenvalue: f64,
    pub accretive: bool,
    pub grid: Vec<f64>,
    /// `γ · ‖(A + γI)⁻¹‖₂` per grid point.
    pub scaled_resolvent_norms: Vec<f64>,
    pub max_scaled_norm: f64,
    pub passed: bool,
}

/// `u = u_range + u_null` with `u_range ∈ closure R(A)` and `u_null ∈ N(A)`.
#[derive(Clone, Debug, Serialize)]
pub struct RangeNullDecomposition {
    pub u_range: DVector<f64>,
    pub u_null: DVector<f64>,
    /// `‖u_null‖ / ‖u‖` (zero for `u = 0`).
    pub norm_bound_check: f64,
}

impl DenseOperator {
    /// Wraps a square matrix with a claimed constant `M`. Nothing is verified
    /// here; call [`certify`](Self::certify) or [`certified`](Self::certified).
    pub fn from_matrix(entries: DMatrix<f64>, m_constant: f64, label: impl Into<String>) -> Result<Self> {
        let n = entries.nrows();
        if n == 0 || entries.ncols() != n {
            return Err(LavregError::InvalidDimension(format!(
                "operator must be square and nonempty, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(LavregError::InvalidInput("operator entries must be finite".into()));
        }
        if !(m_constant >= 1.0) {
            return Err(LavregError::param("m_constant", "must be >= 1"));
        }
        let structure = if is_diagonal(&entries) {
            Structure::Diagonal
        } else if is_lower_triangular(&entries) {
            Structure::LowerTriangular
        } else {
            Structure::Dense
        };
        Ok(DenseOperator {
            entries,
            m_constant,
            label: label.into(),
            grid_step: None,
            accretive: false,
            structure,
            singular: OnceLock::new(),
        })
    }

    /// Runs the certificate and returns the operator with the accretive flag
    /// set from it, or an error if the certificate fails.
    pub fn certified(mut self) -> Result<Self> {
        let cert = self.certify()?;
        if !cert.passed {
            return Err(LavregError::Numerical(format!(
                "operator `{}` failed nonnegativity certificate: max γ‖(A+γI)⁻¹‖ = {:.3e} > M = {}",
                self.label, cert.max_scaled_norm, self.m_constant
            )));
        }
        self.accretive = cert.accretive;
        Ok(self)
    }

    pub(crate) fn with_grid_step(mut self, h: f64) -> Self {
        self.grid_step = Some(h);
        self
    }

    pub(crate) fn with_accretive_flag(mut self, accretive: bool) -> Self {
        self.accretive = accretive;
        self
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn m_constant(&self) -> f64 {
        self.m_constant
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn grid_step(&self) -> Option<f64> {
        self.grid_step
    }

    pub fn is_accretive(&self) -> bool {
        self.accretive
    }

    pub fn structure(&self) -> Structure {
        self.structure
    }

    /// Diagonal entries, if the operator is diagonal.
    pub fn diagonal(&self) -> Option<DVector<f64>> {
        (self.structure == Structure::Diagonal).then(|| self.entries.diagonal())
    }

    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(v)?;
        Ok(match self.structure {
            Structure::Diagonal => self.entries.diagonal().component_mul(v),
            _ => &self.entries * v,
        })
    }

    /// `‖A‖₂`.
    pub fn norm(&self) -> f64 {
        self.singular_summary().max
    }

    /// Smallest singular value of `A`.
    pub fn sigma_min(&self) -> f64 {
        self.singular_summary().min
    }

    fn singular_summary(&self) -> SingularSummary {
        *self.singular.get_or_init(|| match self.structure {
            Structure::Diagonal => {
                let d = self.entries.diagonal().abs();
                SingularSummary {
                    max: d.max(),
                    min: d.min(),
                }
            }
            _ => {
                let sv = self.entries.clone().singular_values();
                SingularSummary {
                    max: sv.max(),
                    min: sv.min(),
                }
            }
        })
    }

    pub(crate) fn check_len(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.dim() {
            return Err(LavregError::InvalidDimension(format!(
                "vector has length {}, operator `{}` has dimension {}",
                v.len(),
                self.label,
                self.dim()
            )));
        }
        Ok(())
    }

    /// Factorizes `A + γI` once; the result can be applied to many vectors.
    pub fn resolvent(&self, gamma: f64) -> Result<Resolvent<'_>> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(LavregError::param("gamma", format!("must be positive and finite, got {gamma}")));
        }
        let factor = match self.structure {
            Structure::Diagonal => {
                let shifted = self.entries.diagonal().add_scalar(gamma);
                if shifted.iter().any(|&d| d == 0.0) {
                    return Err(LavregError::Numerical("singular shifted diagonal".into()));
                }
                Factor::Diagonal(shifted)
            }
            Structure::LowerTriangular => {
                let shifted = self.shifted(gamma);
                if shifted.diagonal().iter().any(|&d| d == 0.0) {
                    return Err(LavregError::Numerical("zero pivot in shifted triangular operator".into()));
                }
                Factor::Lower(shifted)
            }
            Structure::Dense => {
                let shifted = self.shifted(gamma);
                let lu = LU::new(shifted.clone());
                if !lu.is_invertible() {
                    return Err(LavregError::Numerical(format!(
                        "LU breakdown for A + γI at γ = {gamma:e}; operator is not nonnegative"
                    )));
                }
                Factor::Dense {
                    shifted,
                    lu,
                    lu_transpose: OnceLock::new(),
                }
            }
        };
        Ok(Resolvent {
            op: self,
            gamma,
            factor,
        })
    }

    fn shifted(&self, gamma: f64) -> DMatrix<f64> {
        let mut m = self.entries.clone();
        for i in 0..self.dim() {
            m[(i, i)] += gamma;
        }
        m
    }

    /// Nonnegativity certificate: accretivity of the symmetric part, and
    /// `γ‖(A + γI)⁻¹‖₂ ≤ M(1 + CERT_TOL)` on 25 geometric points in `[1e-6, 1e3]`.
    pub fn certify(&self) -> Result<Certificate> {
        let min_eig = self.symmetric_part_min_eigenvalue();
        let accretive = min_eig >= -ACC_TOL;
        let grid = geometric_grid(CERT_GRID_LO, CERT_GRID_HI, CERT_GRID_POINTS);
        let scaled = grid
            .iter()
            .map(|&g| Ok(g * self.resolvent(g)?.norm()?))
            .collect::<Result<Vec<f64>>>()?;
        let max_scaled = scaled.iter().cloned().fold(0.0, f64::max);
        let passed = max_scaled <= self.m_constant * (1.0 + CERT_TOL);
        Ok(Certificate {
            m_constant: self.m_constant,
            symmetric_part_min_eigenvalue: min_eig,
            accretive,
            grid,
            scaled_resolvent_norms: scaled,
            max_scaled_norm: max_scaled,
            passed,
        })
    }

    /// `λ_min((A + Aᵀ)/2)`.
    pub fn symmetric_part_min_eigenvalue(&self) -> f64 {
        match self.structure {
            Structure::Diagonal => self.entries.diagonal().min(),
            _ => {
                let sym = (&self.entries + self.entries.transpose()) * 0.5;
                sym.symmetric_eigenvalues().min()
            }
        }
    }

    /// Writes the matrix as CSV, one row per line, `%.17g` entries.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.dim() {
            let row: Vec<String> = (0..self.dim()).map(|j| fmt_g17(self.entries[(i, j)])).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

enum Factor {
    Diagonal(DVector<f64>),
    Lower(DMatrix<f64>),
    Dense {
        shifted: DMatrix<f64>,
        lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
        lu_transpose: OnceLock<LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    },
}

/// Factorized `(A + γI)⁻¹` at a fixed `γ`.
pub struct Resolvent<'a> {
    op: &'a DenseOperator,
    gamma: f64,
    factor: Factor,
}

impl Resolvent<'_> {
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Solves `(A + γI)x = v`, refining until the residual is at most
    /// `RESIDUAL_TOL · ‖v‖` (at most three refinement steps).
    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.op.check_len(v)?;
        self.solve_refined(v, false)
    }

    /// Solves `(A + γI)ᵀx = v`.
    pub fn apply_transpose(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.op.check_len(v)?;
        self.solve_refined(v, true)
    }

    /// Solves `(A + γI)X = B` column by column, without refinement.
    pub fn apply_matrix(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.nrows() != self.op.dim() {
            return Err(LavregError::InvalidDimension("right-hand side row count mismatch".into()));
        }
        match &self.factor {
            Factor::Diagonal(d) => {
                let mut x = b.clone();
                for (i, mut row) in x.row_iter_mut().enumerate() {
                    row /= d[i];
                }
                Ok(x)
            }
            Factor::Lower(l) => l
                .solve_lower_triangular(b)
                .ok_or_else(|| LavregError::Numerical("triangular solve failed".into())),
            Factor::Dense { lu, .. } => lu
                .solve(b)
                .ok_or_else(|| LavregError::Numerical("LU solve failed".into())),
        }
    }

    fn raw_solve(&self, v: &DVector<f64>, transpose: bool) -> Result<DVector<f64>> {
        let out = match (&self.factor, transpose) {
            (Factor::Diagonal(d), _) => Some(v.component_div(d)),
            (Factor::Lower(l), false) => l.solve_lower_triangular(v),
            (Factor::Lower(l), true) => l.tr_solve_lower_triangular(v),
            (Factor::Dense { lu, .. }, false) => lu.solve(v),
            (Factor::Dense { shifted, lu_transpose, .. }, true) => lu_transpose
                .get_or_init(|| LU::new(shifted.transpose()))
                .solve(v),
        };
        out.ok_or_else(|| LavregError::Numerical(format!("resolvent solve failed at γ = {:e}", self.gamma)))
    }

    fn shifted_mul(&self, x: &DVector<f64>, transpose: bool) -> DVector<f64> {
        let ax = match (&self.factor, transpose) {
            (Factor::Diagonal(_), _) => self.op.entries.diagonal().component_mul(x),
            (_, false) => &self.op.entries * x,
            (_, true) => self.op.entries.tr_mul(x),
        };
        ax + x * self.gamma
    }

    fn solve_refined(&self, v: &DVector<f64>, transpose: bool) -> Result<DVector<f64>> {
        let mut x = self.raw_solve(v, transpose)?;
        if matches!(self.factor, Factor::Diagonal(_)) {
            return Ok(x);
        }
        let target = RESIDUAL_TOL * v.norm();
        for _ in 0..3 {
            let r = v - self.shifted_mul(&x, transpose);
            if r.norm() <= target {
                break;
            }
            x += self.raw_solve(&r, transpose)?;
        }
        Ok(x)
    }

    /// `‖(A + γI)⁻¹‖₂`. Exact for diagonal operators; otherwise Lanczos
    /// iteration on `R⁻ᵀR⁻¹` (a Krylov-accelerated power method with full
    /// reorthogonalization). The Ritz value never overshoots the true norm.
    pub fn norm(&self) -> Result<f64> {
        Ok(self.top_singular()?.0)
    }

    /// Largest singular value of the resolvent and its right singular vector.
    pub fn top_singular(&self) -> Result<(f64, DVector<f64>)> {
        let n = self.op.dim();
        if let Factor::Diagonal(d) = &self.factor {
            let (imin, dmin) = d.abs().argmin();
            let mut e = DVector::zeros(n);
            e[imin] = 1.0;
            return Ok((1.0 / dmin, e));
        }
        let normal_apply = |x: &DVector<f64>| -> Result<DVector<f64>> {
            let y = self.raw_solve(x, false)?;
            self.raw_solve(&y, true)
        };
        let mut q = DVector::from_iterator(n, (0..n).map(|i| 1.0 + i as f64 / n as f64));
        q /= q.norm();
        let mut basis: Vec<DVector<f64>> = Vec::new();
        let mut alphas: Vec<f64> = Vec::new();
        let mut betas: Vec<f64> = Vec::new();
        let max_steps = n.min(LANCZOS_MAX_STEPS);
        loop {
            let mut w = normal_apply(&q)?;
            let alpha = q.dot(&w);
            basis.push(q.clone());
            alphas.push(alpha);
            for _ in 0..2 {
                for b in &basis {
                    let c = b.dot(&w);
                    w.axpy(-c, b, 1.0);
                }
            }
            let beta = w.norm();
            let k = alphas.len();
            let (theta, y) = tridiagonal_top_eigenpair(&alphas, &betas);
            if !theta.is_finite() || theta <= 0.0 {
                return Err(LavregError::Numerical("Lanczos iteration broke down".into()));
            }
            let done = beta * y[k - 1].abs() <= LANCZOS_REL_TOL * theta || beta <= f64::EPSILON * theta || k >= max_steps;
            if done {
                let mut v = DVector::zeros(n);
                for (yi, b) in y.iter().zip(&basis) {
                    v.axpy(*yi, b, 1.0);
                }
                let vn = v.norm();
                return Ok((theta.sqrt(), v / vn));
            }
            betas.push(beta);
            q = w / beta;
        }
    }
}

/// Largest eigenvalue of the symmetric tridiagonal matrix with diagonal `a`
/// and off-diagonal `b` (Sturm bisection), with a unit eigenvector from
/// inverse iteration shifted just above it.
fn tridiagonal_top_eigenpair(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let k = a.len();
    let radius = |i: usize| {
        let left = if i > 0 { b[i - 1].abs() } else { 0.0 };
        let right = if i + 1 < k { b[i].abs() } else { 0.0 };
        left + right
    };
    let mut lo = (0..k).map(|i| a[i] - radius(i)).fold(f64::INFINITY, f64::min);
    let mut hi = (0..k).map(|i| a[i] + radius(i)).fold(f64::NEG_INFINITY, f64::max);
    let scale = lo.abs().max(hi.abs()).max(f64::MIN_POSITIVE);
    // eigenvalues strictly below x
    let count_below = |x: f64| {
        let mut count = 0;
        let mut d = 1.0;
        for i in 0..k {
            let off = if i > 0 { b[i - 1] * b[i - 1] / d } else { 0.0 };
            d = a[i] - x - off;
            if d == 0.0 {
                d = -f64::EPSILON * scale;
            }
            if d < 0.0 {
                count += 1;
            }
        }
        count
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= 2.0 * f64::EPSILON * scale || mid <= lo || mid >= hi {
            break;
        }
        if count_below(mid) == k {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let theta = 0.5 * (lo + hi);
    // T - σI is negative definite for σ above the spectrum, so elimination
    // without pivoting is stable
    let sigma = hi + 4.0 * f64::EPSILON * scale;
    let mut y = vec![1.0; k];
    for _ in 0..3 {
        let mut diag = vec![0.0; k];
        let mut rhs = y.clone();
        diag[0] = a[0] - sigma;
        for i in 1..k {
            let m = b[i - 1] / diag[i - 1];
            diag[i] = a[i] - sigma - m * b[i - 1];
            rhs[i] -= m * rhs[i - 1];
        }
        y[k - 1] = rhs[k - 1] / diag[k - 1];
        for i in (0..k - 1).rev() {
            y[i] = (rhs[i] - b[i] * y[i + 1]) / diag[i];
        }
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        y.iter_mut().for_each(|v| *v /= norm);
    }
    (theta, y)
}

/// Solves `(A + γI)x = v`.
pub fn resolvent_apply(op: &DenseOperator, gamma: f64, v: &DVector<f64>) -> Result<DVector<f64>> {
    op.resolvent(gamma)?.apply(v)
}

/// `‖(A + γI)⁻¹‖₂`.
pub fn resolvent_norm(op: &DenseOperator, gamma: f64) -> Result<f64> {
    op.resolvent(gamma)?.norm()
}

/// Midpoint discretization of `(Vu)(x) = ∫₀ˣ u(y) dy` on `L²(0,1)`:
/// `h` below the diagonal, `h/2` on it, `h = 1/n`.
pub fn build_integration_operator(n: usize) -> Result<DenseOperator> {
    if n < 2 {
        return Err(LavregError::InvalidDimension(format!("integration operator needs n >= 2, got {n}")));
    }
    let h = 1.0 / n as f64;
    let m = DMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => h,
        std::cmp::Ordering::Equal => h / 2.0,
        std::cmp::Ordering::Less => 0.0,
    });
    // Symmetric part is (h/2)·ones, positive semidefinite.
    Ok(DenseOperator::from_matrix(m, 1.0, format!("integration(n={n})"))?
        .with_grid_step(h)
        .with_accretive_flag(true))
}

/// Collocation of the Abel operator with kernel `(x−y)^{α−1}/Γ(α)` at the
/// midpoints `x_i = (i − ½)h`, using exact cell integrals. The diagonal cell
/// is integrated up to `x_i`.
pub fn build_abel_operator(n: usize, alpha: f64) -> Result<DenseOperator> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(LavregError::param("alpha", format!("must lie in (0, 1), got {alpha}")));
    }
    if n < 2 {
        return Err(LavregError::InvalidDimension(format!("Abel operator needs n >= 2, got {n}")));
    }
    let h = 1.0 / n as f64;
    let scale = h.powf(alpha) / statrs::function::gamma::gamma(alpha + 1.0);
    // Entries depend only on i − j: cell k spans [(k − ½)h, (k + ½)h] in x − y.
    let toeplitz: Vec<f64> = (0..n)
        .map(|k| {
            if k == 0 {
                0.5f64.powf(alpha) * scale
            } else {
                let k = k as f64;
                ((k + 0.5).powf(alpha) - (k - 0.5).powf(alpha)) * scale
            }
        })
        .collect();
    let m = DMatrix::from_fn(n, n, |i, j| if i >= j { toeplitz[i - j] } else { 0.0 });
    let op = DenseOperator::from_matrix(m, 1.0, format!("abel(n={n}, alpha={alpha})"))?.with_grid_step(h);
    let min_eig = op.symmetric_part_min_eigenvalue();
    if min_eig < -ACC_TOL {
        return Err(LavregError::Numerical(format!(
            "Abel discretization not accretive: λ_min of symmetric part = {min_eig:e}"
        )));
    }
    Ok(op.with_accretive_flag(true))
}

/// `diag(λ₁, …, λ_n)` with all `λ_i ≥ 0`.
pub fn build_diagonal_operator(lambdas: &[f64]) -> Result<DenseOperator> {
    if lambdas.is_empty() {
        return Err(LavregError::param("lambdas", "must be nonempty"));
    }
    if let Some((i, &l)) = lambdas.iter().enumerate().find(|(_, &l)| !(l >= 0.0) || !l.is_finite()) {
        return Err(LavregError::param("lambdas", format!("entry {i} is {l}, must be finite and >= 0")));
    }
    let m = DMatrix::from_diagonal(&DVector::from_column_slice(lambdas));
    Ok(DenseOperator::from_matrix(m, 1.0, format!("diagonal(n={})", lambdas.len()))?.with_accretive_flag(true))
}

/// Splits `u` into `u_range + u_null` along `closure R(A) ⊕ N(A)`.
pub fn range_null_decompose(op: &DenseOperator, u: &DVector<f64>) -> Result<RangeNullDecomposition> {
    op.check_len(u)?;
    let n = op.dim();
    let sigma_max = op.norm();
    let threshold = NULL_TOL * sigma_max;
    let u_norm = u.norm();

    let u_null = if let Some(d) = op.diagonal() {
        DVector::from_fn(n, |i, _| if d[i].abs() <= threshold { u[i] } else { 0.0 })
    } else {
        let svd = SVD::new(op.entries.clone(), true, true);
        let left = svd.u.as_ref().expect("left singular vectors requested");
        let right_t = svd.v_t.as_ref().expect("right singular vectors requested");
        let range_idx: Vec<usize> = (0..n).filter(|&k| svd.singular_values[k] > threshold).collect();
        let null_idx: Vec<usize> = (0..n).filter(|&k| svd.singular_values[k] <= threshold).collect();
        if null_idx.is_empty() {
            DVector::zeros(n)
        } else if range_idx.is_empty() {
            u.clone()
        } else {
            let mut basis = DMatrix::zeros(n, n);
            for (c, &k) in range_idx.iter().enumerate() {
                basis.set_column(c, &left.column(k));
            }
            let null_basis = DMatrix::from_fn(n, null_idx.len(), |i, c| right_t[(null_idx[c], i)]);
            for c in 0..null_idx.len() {
                basis.set_column(range_idx.len() + c, &null_basis.column(c));
            }
            // Both blocks are orthonormal, so σ_min of the combined basis
            // measures the angle between the subspaces.
            let angle = basis.clone().singular_values().min();
            if angle < 1e-12 {
                return Err(LavregError::DecompositionFailure(format!(
                    "range and nullspace bases nearly parallel (σ_min = {angle:e})"
                )));
            }
            let coeffs = basis
                .lu()
                .solve(u)
                .ok_or_else(|| LavregError::DecompositionFailure("combined basis is singular".into()))?;
            &null_basis * coeffs.rows(range_idx.len(), null_idx.len())
        }
    };
    let u_range = u - &u_null;
    let norm_bound_check = if u_norm > 0.0 { u_null.norm() / u_norm } else { 0.0 };
    Ok(RangeNullDecomposition {
        u_range,
        u_null,
        norm_bound_check,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn dv(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn tridiagonal_top_pair_matches_dense_eigen() {
        for k in [1usize, 2, 7, 40] {
            let a: Vec<f64> = (0..k).map(|i| 1.0 + (i as f64 * 0.7).sin()).collect();
            let b: Vec<f64> = (0..k.saturating_sub(1)).map(|i| 0.3 + 0.1 * (i as f64).cos()).collect();
            let t = DMatrix::from_fn(k, k, |i, j| match (i as i64 - j as i64).abs() {
                0 => a[i],
                1 => b[i.min(j)],
                _ => 0.0,
            });
            let eig = t.clone().symmetric_eigen();
            let (theta, y) = tridiagonal_top_eigenpair(&a, &b);
            assert_relative_eq!(theta, eig.eigenvalues.max(), max_relative = 1e-14);
            let y = DVector::from_vec(y);
            assert!((&t * &y - &y * theta).norm() <= 1e-12 * theta.abs().max(1.0));
        }
    }

    #[test]
    fn integration_n2_entries() {
        let op = build_integration_operator(2).unwrap();
        assert_eq!(op.entries(), &DMatrix::from_row_slice(2, 2, &[0.25, 0.0, 0.5, 0.25]));
        assert_eq!(op.structure(), Structure::LowerTriangular);
        assert!(op.is_accretive());
        assert_eq!(op.grid_step(), Some(0.5));
    }

    #[test]
    fn integration_rejects_small_n() {
        assert!(matches!(build_integration_operator(1), Err(LavregError::InvalidDimension(_))));
    }

    #[test]
    fn integration_symmetric_part_is_rank_one() {
        let op = build_integration_operator(4).unwrap();
        let sym = (op.entries() + op.entries().transpose()) * 0.5;
        assert_eq!(sym, DMatrix::from_element(4, 4, 0.125));
        let mut eig: Vec<f64> = sym.symmetric_eigenvalues().iter().cloned().collect();
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for e in &eig[..3] {
            assert!(e.abs() < 1e-15);
        }
        assert_relative_eq!(eig[3], 0.5, epsilon = 1e-14);
        assert!(op.symmetric_part_min_eigenvalue() >= -ACC_TOL);
    }

    #[test]
    fn abel_parameter_errors() {
        assert!(matches!(build_abel_operator(8, 0.0), Err(LavregError::InvalidParameter { .. })));
        assert!(matches!(build_abel_operator(8, 1.0), Err(LavregError::InvalidParameter { .. })));
        assert!(matches!(build_abel_operator(1, 0.5), Err(LavregError::InvalidDimension(_))));
    }

    #[test]
    fn abel_tends_to_integration_as_alpha_to_one() {
        let v = build_integration_operator(16).unwrap();
        let a = build_abel_operator(16, 1.0 - 1e-9).unwrap();
        assert!((a.entries() - v.entries()).amax() < 1e-8);
    }

    #[test]
    fn diagonal_basics() {
        let op = build_diagonal_operator(&[1.0, 0.0]).unwrap();
        assert_eq!(op.structure(), Structure::Diagonal);
        let d = range_null_decompose(&op, &dv(&[1.0, 1.0])).unwrap();
        assert_eq!(d.u_range, dv(&[1.0, 0.0]));
        assert_eq!(d.u_null, dv(&[0.0, 1.0]));
        assert!(build_diagonal_operator(&[]).is_err());
        assert!(build_diagonal_operator(&[1.0, -1e-3]).is_err());
    }

    #[test]
    fn harmonic_diagonal_resolvent_closed_form() {
        let n = 10;
        let lambdas: Vec<f64> = (1..=n).map(|i| 1.0 / i as f64).collect();
        let op = build_diagonal_operator(&lambdas).unwrap();
        let v = DVector::from_fn(n, |i, _| (i as f64 + 1.0).sin());
        let x = resolvent_apply(&op, 0.3, &v).unwrap();
        for i in 0..n {
            assert_relative_eq!(x[i], v[i] / (lambdas[i] + 0.3), max_relative = 1e-15);
        }
    }

    #[test]
    fn resolvent_small_examples() {
        let id = DenseOperator::from_matrix(DMatrix::identity(3, 3), 1.0, "I").unwrap();
        assert_eq!(resolvent_apply(&id, 1.0, &dv(&[2.0, 0.0, 0.0])).unwrap(), dv(&[1.0, 0.0, 0.0]));
        let d = build_diagonal_operator(&[1.0, 2.0]).unwrap();
        assert_eq!(resolvent_apply(&d, 2.0, &dv(&[3.0, 4.0])).unwrap(), dv(&[1.0, 1.0]));
        assert!(matches!(
            resolvent_apply(&d, 0.0, &dv(&[1.0, 1.0])),
            Err(LavregError::InvalidParameter { .. })
        ));
        assert!(matches!(
            resolvent_apply(&d, 1.0, &dv(&[1.0])),
            Err(LavregError::InvalidDimension(_))
        ));
    }

    #[test]
    fn dense_resolvent_and_transpose() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, -1.0, 1.0, 0.5, 0.0, -0.5, 1.0]);
        let op = DenseOperator::from_matrix(m.clone(), 1.0, "dense").unwrap();
        assert_eq!(op.structure(), Structure::Dense);
        let r = op.resolvent(0.5).unwrap();
        let v = dv(&[1.0, -2.0, 3.0]);
        let x = r.apply(&v).unwrap();
        let shifted = &m + DMatrix::identity(3, 3) * 0.5;
        assert!((&shifted * &x - &v).norm() <= 1e-12 * v.norm());
        let y = r.apply_transpose(&v).unwrap();
        assert!((shifted.transpose() * &y - &v).norm() <= 1e-12 * v.norm());
    }

    #[test]
    fn resolvent_norm_examples() {
        let d = build_diagonal_operator(&[0.0, 1.0]).unwrap();
        assert_relative_eq!(resolvent_norm(&d, 0.5).unwrap(), 2.0, max_relative = 1e-15);
        let id = DenseOperator::from_matrix(DMatrix::identity(4, 4), 1.0, "I").unwrap();
        assert_relative_eq!(resolvent_norm(&id, 1.0).unwrap(), 0.5, max_relative = 1e-12);
    }

    #[test]
    fn resolvent_norm_matches_svd_on_integration() {
        let op = build_integration_operator(32).unwrap();
        for &g in &[1e-4, 1e-2, 1.0] {
            let mut shifted = op.entries().clone();
            for i in 0..32 {
                shifted[(i, i)] += g;
            }
            let exact = 1.0 / shifted.singular_values().min();
            assert_relative_eq!(resolvent_norm(&op, g).unwrap(), exact, max_relative = 1e-8);
        }
    }

    #[test]
    fn certificate_rejects_bad_constant_claim() {
        // Strongly non-normal but with nonnegative spectrum: needs M > 1.
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 10.0, 0.0, 0.0]);
        let op = DenseOperator::from_matrix(m, 1.0, "jordan").unwrap();
        let cert = op.certify().unwrap();
        assert!(!cert.passed);
        assert!(!cert.accretive);
        assert!(op.certified().is_err());
    }

    #[test]
    fn csv_uses_full_precision() {
        let op = build_diagonal_operator(&[0.1, 2.0 / 3.0]).unwrap();
        let csv = op.to_csv();
        assert_eq!(csv, "0.10000000000000001,0\n0,0.66666666666666663\n");
    }

    #[test]
    fn decomposition_trivial_nullspace() {
        let op = build_integration_operator(8).unwrap();
        let u = DVector::from_fn(8, |i, _| i as f64 - 3.0);
        let d = range_null_decompose(&op, &u).unwrap();
        assert_eq!(d.u_null, DVector::zeros(8));
        assert_eq!(d.u_range, u);
    }

    #[test]
    fn decomposition_oblique_dense() {
        // A = [[1, 1], [0, 0]]: R(A) = span{e1}, N(A) = span{(1, -1)}.
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        let op = DenseOperator::from_matrix(m, 1.0, "oblique").unwrap();
        let u = dv(&[0.0, 1.0]);
        let d = range_null_decompose(&op, &u).unwrap();
        assert!((&d.u_null - dv(&[-1.0, 1.0])).norm() < 1e-12);
        assert!((&d.u_range - dv(&[1.0, 0.0])).norm() < 1e-12);
        assert!((op.apply(&d.u_null).unwrap()).norm() < 1e-12);
    }
}
