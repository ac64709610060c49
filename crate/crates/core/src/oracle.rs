//! Brute-force references built from explicit inverses and full
//! expansions, kept separate from the solver paths they check.

use crate::eki::{population_moments_mc, PopulationMoments};
use crate::error::{Error, Result};
use crate::matrix::{symmetrize, Matrix, Vector};
use crate::models::{Ensemble, ForwardMap, GaussianPrior};
use crate::operators::LinearProblem;

fn explicit_gain(c: &Matrix, problem: &LinearProblem) -> Result<Matrix> {
    let a = &problem.a;
    let s = a * c * a.transpose() + &problem.gamma;
    let s_inv = s
        .try_inverse()
        .ok_or_else(|| Error::NotPositiveDefinite("ACAᵀ + Gamma is singular".into()))?;
    Ok(c * a.transpose() * s_inv)
}

/// Posterior mean and covariance `μ = m + CAᵀ(ACAᵀ+Γ)⁻¹(y − Am)`,
/// `Σ = C − CAᵀ(ACAᵀ+Γ)⁻¹AC`, using an explicit `k × k` inverse.
pub fn exact_posterior(m: &Vector, c: &Matrix, problem: &LinearProblem) -> Result<(Vector, Matrix)> {
    if m.len() != problem.state_dim() || c.shape() != (m.len(), m.len()) {
        return Err(Error::dims("prior moments do not match the state dimension"));
    }
    let k = explicit_gain(c, problem)?;
    let mu = m + &k * (&problem.y - &problem.a * m);
    let sigma = c - &k * &problem.a * c;
    Ok((mu, symmetrize(sigma)))
}

/// The four-term expansion of the PO-updated sample covariance:
/// `(I−KA)Ĉ(I−KA)ᵀ + KΓ̂Kᵀ − (I−KA)Ĉ^{uη}Kᵀ − K(Ĉ^{uη})ᵀ(I−KA)ᵀ`.
pub fn po_covariance_expansion(
    e: &Ensemble,
    perturbations: &Matrix,
    problem: &LinearProblem,
) -> Result<Matrix> {
    let n = e.size();
    if perturbations.shape() != (problem.obs_dim(), n) || e.dim() != problem.state_dim() {
        return Err(Error::dims("ensemble or perturbations do not match the problem"));
    }
    let d = e.dim();
    let nf = n as f64;
    let u = e.members();
    let u_bar = u.column_sum() / nf;
    let eta_bar = perturbations.column_sum() / nf;
    let mut c_hat = Matrix::zeros(d, d);
    let mut gamma_hat = Matrix::zeros(problem.obs_dim(), problem.obs_dim());
    let mut c_u_eta = Matrix::zeros(d, problem.obs_dim());
    for j in 0..n {
        let du = u.column(j) - &u_bar;
        let de = perturbations.column(j) - &eta_bar;
        c_hat += &du * du.transpose();
        gamma_hat += &de * de.transpose();
        c_u_eta += &du * de.transpose();
    }
    c_hat /= nf - 1.0;
    gamma_hat /= nf - 1.0;
    c_u_eta /= nf - 1.0;

    let k = explicit_gain(&c_hat, problem)?;
    let i_ka = Matrix::identity(d, d) - &k * &problem.a;
    let out = &i_ka * &c_hat * i_ka.transpose() + &k * gamma_hat * k.transpose()
        - &i_ka * &c_u_eta * k.transpose()
        - &k * c_u_eta.transpose() * i_ka.transpose();
    Ok(out)
}

/// Large-sample population moments for the mean-field update.
pub fn mean_field_reference(
    prior: &GaussianPrior,
    forward: &dyn ForwardMap,
    n_ref: usize,
    seed: u64,
) -> Result<PopulationMoments> {
    population_moments_mc(prior, forward, n_ref, seed)
}
