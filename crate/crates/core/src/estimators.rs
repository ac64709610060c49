//! Sample and localized covariance estimators, effective dimensions and
//! localization radii.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{ensure_finite, operator_norm, sym_eig, symmetrize, Matrix, Vector};
use crate::models::Ensemble;

/// How a localization radius is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LocalizationConfig {
    /// A fixed radius `rho >= 0`.
    Explicit { radius: f64 },
    /// Radius from the covariance-estimation rate, `c * C_(1) * max(...)`.
    Derived { t: f64, c: f64 },
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        LocalizationConfig::Derived { t: 1.0, c: 1.0 }
    }
}

impl LocalizationConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LocalizationConfig::Explicit { radius } if !(radius >= 0.0) || !radius.is_finite() => {
                Err(Error::invalid(format!("radius must be finite and >= 0, got {radius}")))
            }
            LocalizationConfig::Derived { t, c } if !(t >= 1.0) || !(c > 0.0) => Err(
                Error::invalid(format!("derived radius needs t >= 1 and c > 0, got t={t}, c={c}")),
            ),
            _ => Ok(()),
        }
    }

    /// Resolves the radius for a sample covariance estimated from `n` members.
    ///
    /// The derived form plugs the diagonal of the estimate itself into the
    /// rate, since the population diagonal is unknown to the update.
    pub fn radius_for(&self, estimate: &Matrix, n: usize) -> Result<f64> {
        self.validate()?;
        match *self {
            LocalizationConfig::Explicit { radius } => Ok(radius),
            LocalizationConfig::Derived { t, c } => {
                let dims = effective_dims(estimate)?;
                theorem_radius_cov(dims.max_diag, dims.r_inf, n, t, c)
            }
        }
    }
}

/// Soft-sparsity class: rows with `sum_j |B_ij|^q <= R_q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityClass {
    pub q: f64,
    pub radius: f64,
}

impl SparsityClass {
    pub fn new(q: f64, radius: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&q) || !(radius > 0.0) {
            return Err(Error::invalid(format!(
                "sparsity class needs q in [0,1) and R_q > 0, got q={q}, R_q={radius}"
            )));
        }
        Ok(Self { q, radius })
    }

    pub fn contains(&self, b: &Matrix) -> Result<bool> {
        Ok(row_lq_norm(b, self.q)? <= self.radius)
    }
}

/// Effective-dimension summary of a PSD matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveDims {
    /// `trace / ‖S‖`.
    pub r2: f64,
    /// `max_j S_(j) ln(j+1) / S_(1)` over the decreasing diagonal.
    pub r_inf: f64,
    pub trace: f64,
    pub op_norm: f64,
    /// Largest diagonal entry `S_(1)`.
    pub max_diag: f64,
}

pub fn sample_mean(e: &Ensemble) -> Vector {
    mean_of_columns(e.members())
}

pub(crate) fn mean_of_columns(members: &Matrix) -> Vector {
    members.column_sum() / members.ncols() as f64
}

/// Columns minus their mean.
pub fn anomalies(members: &Matrix) -> Matrix {
    let mean = mean_of_columns(members);
    let mut out = members.clone();
    for mut col in out.column_iter_mut() {
        col -= &mean;
    }
    out
}

/// Sample covariance with the `N - 1` divisor.
pub fn sample_cov(e: &Ensemble) -> Result<Matrix> {
    cov_of_columns(e.members())
}

pub(crate) fn cov_of_columns(members: &Matrix) -> Result<Matrix> {
    let n = members.ncols();
    if n < 2 {
        return Err(Error::invalid("sample covariance needs at least 2 members"));
    }
    let x = anomalies(members);
    Ok(symmetrize(&x * x.transpose() / (n as f64 - 1.0)))
}

/// `1/(N-1) sum_n (x_n - x̄)(y_n - ȳ)ᵀ`, a `d × k` matrix.
pub fn sample_cross_cov(x: &Ensemble, y: &Ensemble) -> Result<Matrix> {
    cross_cov_of_columns(x.members(), y.members())
}

pub(crate) fn cross_cov_of_columns(x: &Matrix, y: &Matrix) -> Result<Matrix> {
    let n = x.ncols();
    if y.ncols() != n {
        return Err(Error::invalid(format!(
            "cross-covariance needs equal ensemble sizes, got {n} and {}",
            y.ncols()
        )));
    }
    if n < 2 {
        return Err(Error::invalid("cross-covariance needs at least 2 members"));
    }
    let xa = anomalies(x);
    let ya = anomalies(y);
    Ok(&xa * ya.transpose() / (n as f64 - 1.0))
}

/// Keeps entries with `|b| >= rho`, zeroes the rest.
pub fn threshold(b: &Matrix, rho: f64) -> Result<Matrix> {
    if !(rho >= 0.0) {
        return Err(Error::invalid(format!("threshold radius must be >= 0, got {rho}")));
    }
    Ok(b.map(|v| if v.abs() >= rho { v } else { 0.0 }))
}

/// Eigenvalue-clipped projection onto the PSD cone.
pub fn positive_part(s: &Matrix) -> Result<Matrix> {
    let eig = sym_eig(s)?;
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return Ok(symmetrize(s.clone()));
    }
    Ok(eig.map_spectrum(|l| l.max(0.0)))
}

/// `positive_part(threshold(B, rho))`.
pub fn localized_cov(b: &Matrix, rho: f64) -> Result<Matrix> {
    positive_part(&threshold(b, rho)?)
}

pub fn effective_dims(s: &Matrix) -> Result<EffectiveDims> {
    ensure_finite(s, "matrix")?;
    let op_norm = operator_norm(s)?;
    if op_norm == 0.0 {
        return Err(Error::invalid("effective dimension of the zero matrix is undefined"));
    }
    let trace = s.trace();
    let mut diag: Vec<f64> = s.diagonal().iter().copied().collect();
    diag.sort_by(|a, b| b.total_cmp(a));
    let max_diag = diag[0];
    if !(max_diag > 0.0) {
        return Err(Error::invalid("effective dimension needs a positive diagonal"));
    }
    let peak = diag
        .iter()
        .enumerate()
        .map(|(j, &q)| q * ((j + 2) as f64).ln())
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(EffectiveDims {
        r2: trace / op_norm,
        r_inf: peak / max_diag,
        trace,
        op_norm,
        max_diag,
    })
}

fn check_rate_params(n: usize, t: f64, c: f64) -> Result<()> {
    if n == 0 || !(t >= 1.0) || !(c > 0.0) {
        return Err(Error::invalid(format!(
            "rate parameters need N >= 1, t >= 1, c > 0 (got N={n}, t={t}, c={c})"
        )));
    }
    Ok(())
}

/// `c * C_(1) * max(sqrt(r_inf/N), t r_inf/N, sqrt(t/N), t/N)`.
pub fn theorem_radius_cov(diag_max: f64, r_inf: f64, n: usize, t: f64, c: f64) -> Result<f64> {
    check_rate_params(n, t, c)?;
    if !(diag_max >= 0.0) || !(r_inf >= 0.0) {
        return Err(Error::invalid("diagonal maximum and r_inf must be >= 0"));
    }
    let n = n as f64;
    let rate = (r_inf / n)
        .sqrt()
        .max(t * r_inf / n)
        .max((t / n).sqrt())
        .max(t / n);
    Ok(c * diag_max * rate)
}

/// Cross-covariance radius:
/// `c (C_(1) ∨ Cpp_(1)) ((t/N ∨ sqrt(t/N)) (sqrt r_inf(C) ∨ sqrt r_inf(Cpp)) ∨ sqrt(r_inf(C)/N) sqrt(r_inf(Cpp)/N))`.
pub fn theorem_radius_cross(
    diag_max_u: f64,
    diag_max_p: f64,
    rinf_u: f64,
    rinf_p: f64,
    n: usize,
    t: f64,
    c: f64,
) -> Result<f64> {
    check_rate_params(n, t, c)?;
    if [diag_max_u, diag_max_p, rinf_u, rinf_p]
        .iter()
        .any(|v| !(*v >= 0.0))
    {
        return Err(Error::invalid("diagonal maxima and r_inf values must be >= 0"));
    }
    let n = n as f64;
    let scale = diag_max_u.max(diag_max_p);
    let tail = (t / n).max((t / n).sqrt()) * rinf_u.sqrt().max(rinf_p.sqrt());
    let product = (rinf_u / n).sqrt() * (rinf_p / n).sqrt();
    Ok(c * scale * tail.max(product))
}

/// `max_i sum_j |B_ij|^q`, with `|x|^0 = 1{x != 0}`.
pub fn row_lq_norm(b: &Matrix, q: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::invalid(format!("q must lie in [0,1), got {q}")));
    }
    ensure_finite(b, "matrix")?;
    let term = |x: f64| {
        if q == 0.0 {
            if x != 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            x.abs().powf(q)
        }
    };
    Ok(b.row_iter()
        .map(|row| row.iter().map(|&x| term(x)).sum::<f64>())
        .fold(0.0_f64, f64::max))
}
