//! Kalman gain, mean and covariance update operators, the nonlinear gain,
//! and evaluators for their continuity/boundedness bounds.

use nalgebra::Cholesky;

use crate::error::{Error, Result};
use crate::matrix::{
    ensure_finite, ensure_finite_vec, ensure_square, ensure_symmetric, operator_norm, sym_eig,
    symmetrize, Matrix, Vector,
};

/// `y = Au + η`, `η ~ N(0, Γ)`.
#[derive(Debug, Clone)]
pub struct LinearProblem {
    pub a: Matrix,
    pub gamma: Matrix,
    pub y: Vector,
}

impl LinearProblem {
    pub fn new(a: Matrix, gamma: Matrix, y: Vector) -> Result<Self> {
        ensure_finite(&a, "A")?;
        ensure_finite_vec(&y, "y")?;
        check_gamma(&gamma, a.nrows())?;
        if y.len() != a.nrows() {
            return Err(Error::dims(format!(
                "y has length {} but A has {} rows",
                y.len(),
                a.nrows()
            )));
        }
        Ok(Self { a, gamma, y })
    }

    pub fn state_dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn obs_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn gain(&self, c: &Matrix) -> Result<Matrix> {
        kalman_gain(c, &self.a, &self.gamma)
    }

    /// `‖Γ⁻¹‖`, the reciprocal of the smallest eigenvalue of `Γ`.
    pub fn gamma_inv_norm(&self) -> Result<f64> {
        gamma_inv_norm(&self.gamma)
    }
}

fn check_gamma(gamma: &Matrix, k: usize) -> Result<()> {
    ensure_square(gamma, "Gamma")?;
    if gamma.nrows() != k {
        return Err(Error::dims(format!(
            "Gamma is {}x{} but the observation dimension is {k}",
            gamma.nrows(),
            gamma.ncols()
        )));
    }
    ensure_symmetric(gamma, "Gamma")?;
    Cholesky::new(gamma.clone())
        .map(|_| ())
        .ok_or_else(|| Error::NotPositiveDefinite("Gamma".into()))
}

pub(crate) fn gamma_inv_norm(gamma: &Matrix) -> Result<f64> {
    let eig = sym_eig(gamma)?;
    let low = eig.eigenvalues[eig.dim() - 1];
    if !(low > 0.0) {
        return Err(Error::NotPositiveDefinite("Gamma".into()));
    }
    Ok(1.0 / low)
}

fn check_cov_dims(c: &Matrix, a: &Matrix) -> Result<()> {
    ensure_square(c, "C")?;
    if c.nrows() != a.ncols() {
        return Err(Error::dims(format!(
            "C is {}x{} but A has {} columns",
            c.nrows(),
            c.ncols(),
            a.ncols()
        )));
    }
    Ok(())
}

/// Solves `X S = B` for symmetric positive definite `S` via Cholesky.
fn right_solve_pd(b: &Matrix, s: Matrix, what: &str) -> Result<Matrix> {
    let chol = Cholesky::new(symmetrize(s))
        .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))?;
    Ok(chol.solve(&b.transpose()).transpose())
}

/// `𝒦(C) = CAᵀ(ACAᵀ + Γ)⁻¹`.
pub fn kalman_gain(c: &Matrix, a: &Matrix, gamma: &Matrix) -> Result<Matrix> {
    check_cov_dims(c, a)?;
    if gamma.nrows() != a.nrows() || gamma.ncols() != a.nrows() {
        return Err(Error::dims("Gamma must be k x k with k = rows of A"));
    }
    ensure_finite(c, "C")?;
    let ac = a * c;
    let s = &ac * a.transpose() + gamma;
    // CAᵀ = (AC)ᵀ for symmetric C
    right_solve_pd(&ac.transpose(), s, "ACAᵀ + Gamma")
}

/// `ℳ(m, C) = m + 𝒦(C)(y − Am)`.
pub fn mean_update(m: &Vector, c: &Matrix, problem: &LinearProblem) -> Result<Vector> {
    if m.len() != problem.state_dim() {
        return Err(Error::dims(format!(
            "mean has length {} but the state dimension is {}",
            m.len(),
            problem.state_dim()
        )));
    }
    let k = problem.gain(c)?;
    Ok(m + k * (&problem.y - &problem.a * m))
}

/// `𝒞(C) = (I − 𝒦(C)A)C`, symmetrized.
pub fn cov_update(c: &Matrix, a: &Matrix, gamma: &Matrix) -> Result<Matrix> {
    let k = kalman_gain(c, a, gamma)?;
    Ok(cov_update_with_gain(c, a, &k))
}

pub(crate) fn cov_update_with_gain(c: &Matrix, a: &Matrix, k: &Matrix) -> Matrix {
    symmetrize(c - k * (a * c))
}

/// `𝒫(Cup, Cpp) = α Cup (α Cpp + Γ)⁻¹`.
pub fn nonlinear_gain(cup: &Matrix, cpp: &Matrix, gamma: &Matrix, alpha: f64) -> Result<Matrix> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("alpha must be > 0, got {alpha}")));
    }
    ensure_finite(cup, "Cup")?;
    ensure_symmetric(cpp, "Cpp")?;
    let k = cpp.nrows();
    if cup.ncols() != k || gamma.nrows() != k || gamma.ncols() != k {
        return Err(Error::dims(format!(
            "Cup is {}x{}, Cpp is {k}x{k}, Gamma is {}x{}",
            cup.nrows(),
            cup.ncols(),
            gamma.nrows(),
            gamma.ncols()
        )));
    }
    right_solve_pd(&(cup * alpha), cpp * alpha + gamma, "alpha Cpp + Gamma")
}

/// Right-hand sides of the continuity and boundedness estimates for the
/// gain, mean, covariance and nonlinear-gain operators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    /// Bound on `‖𝒦(Q)‖`.
    pub gain_bound: f64,
    /// Bound on `‖𝒦(Q) − 𝒦(P)‖`.
    pub gain_lipschitz: f64,
    /// Bound on `‖ℳ(m, Q)‖`.
    pub mean_bound: f64,
    /// Bound on `‖ℳ(m, Q) − ℳ(m', P)‖`.
    pub mean_lipschitz: f64,
    /// Bound on `‖𝒞(Q) − 𝒞(P)‖`.
    pub cov_lipschitz: f64,
    /// Bound on `‖𝒫(QAᵀ, AQAᵀ)‖`.
    pub nonlinear_gain_bound: f64,
    /// Bound on `‖𝒫(QAᵀ, AQAᵀ) − 𝒫(PAᵀ, APAᵀ)‖`.
    pub nonlinear_gain_lipschitz: f64,
}

/// Bounds for the pair `(P, Q)` with both means at the origin.
pub fn lipschitz_bounds(p: &Matrix, q: &Matrix, problem: &LinearProblem) -> Result<BoundReport> {
    let zero = Vector::zeros(problem.state_dim());
    lipschitz_bounds_at(p, q, &zero, &zero, problem)
}

/// Bounds for `(P, Q)` where `m` is paired with `Q` and `m_prime` with `P`.
///
/// The nonlinear-gain entries use the linear-map moments
/// `(QAᵀ, AQAᵀ)` and `(PAᵀ, APAᵀ)`.
pub fn lipschitz_bounds_at(
    p: &Matrix,
    q: &Matrix,
    m: &Vector,
    m_prime: &Vector,
    problem: &LinearProblem,
) -> Result<BoundReport> {
    check_cov_dims(p, &problem.a)?;
    check_cov_dims(q, &problem.a)?;
    let d = problem.state_dim();
    if m.len() != d || m_prime.len() != d {
        return Err(Error::dims("means must have the state dimension"));
    }
    let a = &problem.a;
    let na = operator_norm(a)?;
    let gi = problem.gamma_inv_norm()?;
    let np = operator_norm(p)?;
    let nq = operator_norm(q)?;
    let dqp = operator_norm(&(q - p))?;
    let resid = (&problem.y - a * m).norm();
    let resid_prime = (&problem.y - a * m_prime).norm();

    let gain_lipschitz = dqp * na * gi * (1.0 + np.min(nq) * na * na * gi);
    let gain_bound = nq * na * gi;
    let mean_bound = m.norm() + nq * na * gi * resid;
    let mean_lipschitz = (m - m_prime).norm() * (1.0 + na * na * gi * nq)
        + dqp * na * gi * (1.0 + na * na * gi * np) * resid_prime;
    let cov_lipschitz =
        dqp * (1.0 + na * na * gi * (nq + np) + na.powi(4) * gi * gi * nq * np);

    let up_q = q * a.transpose();
    let up_p = p * a.transpose();
    let pp_q = a * &up_q;
    let pp_p = a * &up_p;
    let n_up_q = operator_norm(&up_q)?;
    let nonlinear_gain_lipschitz =
        gi * operator_norm(&(&up_q - &up_p))? + gi * gi * n_up_q * operator_norm(&(pp_q - pp_p))?;
    let nonlinear_gain_bound = gi * n_up_q + gi * gi * operator_norm(&symmetrize(a * &up_q))?;

    Ok(BoundReport {
        gain_bound,
        gain_lipschitz,
        mean_bound,
        mean_lipschitz,
        cov_lipschitz,
        nonlinear_gain_bound,
        nonlinear_gain_lipschitz,
    })
}
