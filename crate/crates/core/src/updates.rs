//! One-step ensemble updates: perturbed observations (PO), square root
//! (ETKF and EAKF) with member back-out, and their localized variants.

use nalgebra::Cholesky;

use crate::error::{Error, Result};
use crate::estimators::{
    anomalies, cov_of_columns, cross_cov_of_columns, localized_cov, mean_of_columns,
    LocalizationConfig,
};
use crate::matrix::{max_norm, operator_norm, psd_eig, sym_eig, symmetrize, Matrix, Vector};
use crate::models::{sample_noise, Ensemble};
use crate::operators::LinearProblem;

/// Side information reported by an update.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    /// `‖Ô‖` for PO updates.
    pub offset_norm: Option<f64>,
    /// The gain used to move the members.
    pub gain: Matrix,
    /// Localization radius, for localized updates.
    pub radius_used: Option<f64>,
    /// `‖mean(members) − mu_hat‖₂` after square-root back-out.
    pub mean_drift: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct UpdateResult {
    pub ensemble: Ensemble,
    pub mu_hat: Vector,
    pub sigma_hat: Matrix,
    pub diagnostics: Diagnostics,
}

fn check_ensemble(e: &Ensemble, problem: &LinearProblem) -> Result<()> {
    if e.dim() != problem.state_dim() {
        return Err(Error::dims(format!(
            "ensemble dimension {} does not match the state dimension {}",
            e.dim(),
            problem.state_dim()
        )));
    }
    Ok(())
}

fn check_perturbations(eta: &Matrix, e: &Ensemble, problem: &LinearProblem) -> Result<()> {
    if eta.nrows() != problem.obs_dim() || eta.ncols() != e.size() {
        return Err(Error::dims(format!(
            "perturbations must be {}x{}, got {}x{}",
            problem.obs_dim(),
            e.size(),
            eta.nrows(),
            eta.ncols()
        )));
    }
    Ok(())
}

/// `υ_n = u_n + K(y − A u_n − η_n)` for every column.
fn move_members(u: &Matrix, k: &Matrix, problem: &LinearProblem, eta: &Matrix) -> Matrix {
    let mut innov = -(&problem.a * u) - eta;
    for mut col in innov.column_iter_mut() {
        col += &problem.y;
    }
    u + k * innov
}

/// `𝒦(Γ̂ − Γ)𝒦ᵀ − (I − 𝒦A)Ĉ^{uη}𝒦ᵀ − 𝒦(Ĉ^{uη})ᵀ(I − Aᵀ𝒦ᵀ)` with `𝒦 = 𝒦(Ĉ)`.
pub fn offset(
    c_hat: &Matrix,
    gamma_hat: &Matrix,
    c_u_eta_hat: &Matrix,
    problem: &LinearProblem,
) -> Result<Matrix> {
    let k = problem.gain(c_hat)?;
    offset_with_gain(&k, gamma_hat, c_u_eta_hat, problem)
}

fn offset_with_gain(
    k: &Matrix,
    gamma_hat: &Matrix,
    c_u_eta_hat: &Matrix,
    problem: &LinearProblem,
) -> Result<Matrix> {
    let (d, kd) = (problem.state_dim(), problem.obs_dim());
    if gamma_hat.shape() != (kd, kd) || c_u_eta_hat.shape() != (d, kd) {
        return Err(Error::dims(format!(
            "offset needs Gamma_hat {kd}x{kd} and C_u_eta {d}x{kd}"
        )));
    }
    let i_minus_ka = Matrix::identity(d, d) - k * &problem.a;
    let cross = &i_minus_ka * c_u_eta_hat * k.transpose();
    let noise = k * (gamma_hat - &problem.gamma) * k.transpose();
    Ok(symmetrize(noise - &cross - cross.transpose()))
}

/// Perturbed-observation update with `η_n ~ N(0, Γ)` drawn from `seed`.
pub fn po_update(e: &Ensemble, problem: &LinearProblem, seed: u64) -> Result<UpdateResult> {
    check_ensemble(e, problem)?;
    let eta = sample_noise(&problem.gamma, e.size(), seed)?;
    po_update_with_perturbations(e, problem, eta.members())
}

/// Perturbed-observation update with caller-supplied perturbations (`k × N`).
pub fn po_update_with_perturbations(
    e: &Ensemble,
    problem: &LinearProblem,
    eta: &Matrix,
) -> Result<UpdateResult> {
    po_core(e, problem, eta, None)
}

fn po_core(
    e: &Ensemble,
    problem: &LinearProblem,
    eta: &Matrix,
    radius: Option<f64>,
) -> Result<UpdateResult> {
    check_ensemble(e, problem)?;
    check_perturbations(eta, e, problem)?;
    let u = e.members();
    let c_hat = cov_of_columns(u)?;
    let c_used = match radius {
        Some(rho) => localized_cov(&c_hat, rho)?,
        None => c_hat,
    };
    let k = problem.gain(&c_used)?;
    let updated = move_members(u, &k, problem, eta);
    let gamma_hat = cov_of_columns(eta)?;
    let c_u_eta = cross_cov_of_columns(u, eta)?;
    let off = offset_with_gain(&k, &gamma_hat, &c_u_eta, problem)?;
    let mu_hat = mean_of_columns(&updated);
    let sigma_hat = cov_of_columns(&updated)?;
    Ok(UpdateResult {
        ensemble: Ensemble::new(updated)?,
        mu_hat,
        sigma_hat,
        diagnostics: Diagnostics {
            offset_norm: Some(operator_norm(&off)?),
            gain: k,
            radius_used: radius,
            mean_drift: None,
        },
    })
}

/// `Ĉ^{1/2} = (N−1)^{−1/2}[u_1 − m̂, …, u_N − m̂]`.
pub fn ensemble_sqrt(e: &Ensemble) -> Matrix {
    anomalies(e.members()) / ((e.size() as f64) - 1.0).sqrt()
}

/// `W = L⁻¹ A X` with `Γ = L Lᵀ`, so that `WᵀW = XᵀAᵀΓ⁻¹AX`.
fn whitened_obs(x: &Matrix, problem: &LinearProblem) -> Result<Matrix> {
    let chol = Cholesky::new(problem.gamma.clone())
        .ok_or_else(|| Error::NotPositiveDefinite("Gamma".into()))?;
    let mut ax = &problem.a * x;
    chol.l_dirty().solve_lower_triangular_mut(&mut ax);
    Ok(ax)
}

/// `X (I + WᵀW)^{−1/2}` computed through the eigendecomposition of the
/// smaller `W Wᵀ`, using `(I + WᵀW)^{−1/2} = I − Wᵀ Z h(Λ) Zᵀ W` with
/// `h(λ) = (1 − (1+λ)^{−1/2}) / λ`.
fn adjust_factor(x: &Matrix, w: &Matrix) -> Result<Matrix> {
    let small = symmetrize(w * w.transpose());
    let eig = sym_eig(&small)?;
    let h = |l: f64| {
        let l = l.max(0.0);
        if l < 1e-8 {
            // series of (1 − (1+λ)^{−1/2}) / λ
            0.5 - 0.375 * l
        } else {
            (1.0 - 1.0 / (1.0 + l).sqrt()) / l
        }
    };
    let core = eig.map_spectrum(h);
    let xw = x * w.transpose();
    Ok(x - xw * core * w)
}

/// Gain `𝒦(C)` and `ℳ(m̂, C)`.
fn sr_mean(e: &Ensemble, c: &Matrix, problem: &LinearProblem) -> Result<(Matrix, Vector)> {
    let k = problem.gain(c)?;
    let m_hat = mean_of_columns(e.members());
    let mu_hat = &m_hat + &k * (&problem.y - &problem.a * &m_hat);
    Ok((k, mu_hat))
}

/// Square-root update with the ensemble-space transform
/// `Σ̂^{1/2} = Ĉ^{1/2} E (I + Λ)^{−1/2} U`.
///
/// `U` defaults to the identity. The returned `sigma_hat` is
/// `Σ̂^{1/2} Σ̂^{1/2}ᵀ`; members come from [`sr_backout`].
pub fn etkf_update(
    e: &Ensemble,
    problem: &LinearProblem,
    u: Option<&Matrix>,
) -> Result<UpdateResult> {
    check_ensemble(e, problem)?;
    let n = e.size();
    if let Some(u) = u {
        if u.shape() != (n, n) {
            return Err(Error::invalid(format!("U must be {n}x{n}")));
        }
        let defect = max_norm(&(u.transpose() * u - Matrix::identity(n, n)))?;
        if defect > 1e-8 {
            return Err(Error::invalid(format!(
                "U is not orthogonal (max |UᵀU − I| = {defect:e})"
            )));
        }
    }
    let x = ensemble_sqrt(e);
    let w = whitened_obs(&x, problem)?;
    let t = symmetrize(w.transpose() * &w);
    let eig = sym_eig(&t)?;
    let mut sigma_sqrt = &x * &eig.eigenvectors;
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        sigma_sqrt.column_mut(j).scale_mut(1.0 / (1.0 + l.max(0.0)).sqrt());
    }
    if let Some(u) = u {
        sigma_sqrt *= u;
    }
    finish_sr(e, problem, sigma_sqrt)
}

/// Square-root update with the state-space adjustment
/// `Σ̂^{1/2} = Ĉ^{1/2}(I + MMᵀ)^{−1/2}`, `M = (AĈ^{1/2})ᵀΓ^{−1/2}`.
///
/// The transform is symmetric and fixes `1_N`, so backed-out members keep
/// the analysis mean exactly.
pub fn eakf_update(e: &Ensemble, problem: &LinearProblem) -> Result<UpdateResult> {
    check_ensemble(e, problem)?;
    let x = ensemble_sqrt(e);
    let w = whitened_obs(&x, problem)?;
    let sigma_sqrt = adjust_factor(&x, &w)?;
    finish_sr(e, problem, sigma_sqrt)
}

fn finish_sr(e: &Ensemble, problem: &LinearProblem, sigma_sqrt: Matrix) -> Result<UpdateResult> {
    let c_hat = cov_of_columns(e.members())?;
    let (k, mu_hat) = sr_mean(e, &c_hat, problem)?;
    let sigma_hat = symmetrize(&sigma_sqrt * sigma_sqrt.transpose());
    let (ensemble, drift) = sr_backout(&sigma_sqrt, &mu_hat)?;
    Ok(UpdateResult {
        ensemble,
        mu_hat,
        sigma_hat,
        diagnostics: Diagnostics {
            offset_norm: None,
            gain: k,
            radius_used: None,
            mean_drift: Some(drift),
        },
    })
}

/// Members `υ_n = √(N−1) [Σ̂^{1/2}]_n + mu_hat`, together with
/// `‖mean(υ) − mu_hat‖₂`.
pub fn sr_backout(sigma_sqrt: &Matrix, mu_hat: &Vector) -> Result<(Ensemble, f64)> {
    if sigma_sqrt.nrows() != mu_hat.len() {
        return Err(Error::dims(format!(
            "square-root factor has {} rows but the mean has length {}",
            sigma_sqrt.nrows(),
            mu_hat.len()
        )));
    }
    let n = sigma_sqrt.ncols();
    if n < 2 {
        return Err(Error::invalid("back-out needs at least 2 columns"));
    }
    let mut members = sigma_sqrt * ((n as f64) - 1.0).sqrt();
    for mut col in members.column_iter_mut() {
        col += mu_hat;
    }
    let drift = (mean_of_columns(&members) - mu_hat).norm();
    Ok((Ensemble::new(members)?, drift))
}

/// PO update with `Ĉ` replaced by `Ĉ_ρ = positive_part(threshold(Ĉ, ρ))`.
pub fn localized_po_update(
    e: &Ensemble,
    problem: &LinearProblem,
    loc: &LocalizationConfig,
    seed: u64,
) -> Result<UpdateResult> {
    check_ensemble(e, problem)?;
    let eta = sample_noise(&problem.gamma, e.size(), seed)?;
    localized_po_update_with_perturbations(e, problem, loc, eta.members())
}

pub fn localized_po_update_with_perturbations(
    e: &Ensemble,
    problem: &LinearProblem,
    loc: &LocalizationConfig,
    eta: &Matrix,
) -> Result<UpdateResult> {
    check_ensemble(e, problem)?;
    let c_hat = cov_of_columns(e.members())?;
    let rho = loc.radius_for(&c_hat, e.size())?;
    po_core(e, problem, eta, Some(rho))
}

/// Square-root update driven by `Ĉ_ρ`: `mu_hat = ℳ(m̂, Ĉ_ρ)`,
/// `sigma_hat = 𝒞(Ĉ_ρ)`.
///
/// With `R` the symmetric square root of `Ĉ_ρ`, the analysis factor is
/// `R (I + RAᵀΓ⁻¹AR)^{−1/2}` and members move by the adjustment
/// `B = R (I + RAᵀΓ⁻¹AR)^{−1/2} R⁺` applied to the prior anomalies. At
/// `ρ = 0` the members reproduce `sigma_hat`; for `ρ > 0` their sample
/// covariance is `B Ĉ Bᵀ`.
pub fn localized_sr_update(
    e: &Ensemble,
    problem: &LinearProblem,
    loc: &LocalizationConfig,
) -> Result<UpdateResult> {
    check_ensemble(e, problem)?;
    let c_hat = cov_of_columns(e.members())?;
    let rho = loc.radius_for(&c_hat, e.size())?;
    let c_rho = localized_cov(&c_hat, rho)?;
    let (k, mu_hat) = sr_mean(e, &c_rho, problem)?;

    let eig = psd_eig(&c_rho)?;
    let r = eig.map_spectrum(f64::sqrt);
    let top = eig.eigenvalues[0];
    let r_pinv = eig.map_spectrum(|l| {
        if l > 1e-12 * top.max(f64::MIN_POSITIVE) {
            1.0 / l.sqrt()
        } else {
            0.0
        }
    });
    let w = whitened_obs(&r, problem)?;
    let sigma_sqrt = adjust_factor(&r, &w)?;
    let sigma_hat = symmetrize(&sigma_sqrt * sigma_sqrt.transpose());

    let b = &sigma_sqrt * r_pinv;
    let mut members = b * anomalies(e.members());
    for mut col in members.column_iter_mut() {
        col += &mu_hat;
    }
    let drift = (mean_of_columns(&members) - &mu_hat).norm();
    Ok(UpdateResult {
        ensemble: Ensemble::new(members)?,
        mu_hat,
        sigma_hat,
        diagnostics: Diagnostics {
            offset_norm: None,
            gain: k,
            radius_used: Some(rho),
            mean_drift: Some(drift),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::pseudo_inverse;
    use crate::models::{sample_ensemble, GaussianPrior};
    use crate::operators::{cov_update, mean_update};
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    fn scalar(v: f64) -> Matrix {
        Matrix::from_element(1, 1, v)
    }

    fn ens1(vals: &[f64]) -> Ensemble {
        Ensemble::new(Matrix::from_row_slice(1, vals.len(), vals)).unwrap()
    }

    fn random_instance(seed: u64, d: usize, k: usize, n: usize) -> (Ensemble, LinearProblem) {
        let mut rng = rng_from_seed(seed);
        let g = Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let c = symmetrize(&g * g.transpose() + Matrix::identity(d, d) * 0.1);
        let a = Matrix::from_fn(k, d, |_, _| rng.random_range(-1.0..1.0));
        let h = Matrix::from_fn(k, k, |_, _| rng.random_range(-0.5..0.5));
        let gamma = symmetrize(&h * h.transpose() + Matrix::identity(k, k) * 0.5);
        let y = Vector::from_fn(k, |_, _| rng.random_range(-2.0..2.0));
        let prior = GaussianPrior::centered(c).unwrap();
        let e = sample_ensemble(&prior, n, seed ^ 0xABCD).unwrap();
        (e, LinearProblem::new(a, gamma, y).unwrap())
    }

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        max_norm(&(a - b)).unwrap() / (1.0 + max_norm(b).unwrap())
    }

    #[test]
    fn po_zero_perturbations_gives_mean_update_per_member() {
        let e = ens1(&[0.0, 2.0]);
        let p = LinearProblem::new(scalar(1.0), scalar(2.0), Vector::from_element(1, 1.0)).unwrap();
        let r = po_update_with_perturbations(&e, &p, &Matrix::zeros(1, 2)).unwrap();
        let m = r.ensemble.members();
        assert!((m[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((m[(0, 1)] - 1.5).abs() < 1e-15);

        let (e, p) = random_instance(3, 4, 3, 8);
        let r = po_update_with_perturbations(&e, &p, &Matrix::zeros(3, 8)).unwrap();
        let c_hat = cov_of_columns(e.members()).unwrap();
        for n in 0..8 {
            let expect = mean_update(&e.member(n), &c_hat, &p).unwrap();
            assert!((r.ensemble.member(n) - expect).amax() < 1e-12);
        }
    }

    #[test]
    fn offset_examples() {
        let (e, p) = random_instance(5, 3, 2, 6);
        let c_hat = cov_of_columns(e.members()).unwrap();
        let zero = offset(&c_hat, &p.gamma, &Matrix::zeros(3, 2), &p).unwrap();
        assert!(max_norm(&zero).unwrap() < 1e-15);
        let o = offset(&c_hat, &Matrix::zeros(2, 2), &Matrix::zeros(3, 2), &p).unwrap();
        let k = p.gain(&c_hat).unwrap();
        let expect = -(&k * &p.gamma * k.transpose());
        assert!(rel_err(&o, &expect) < 1e-14);
    }

    #[test]
    fn po_sample_cov_is_cov_update_plus_offset() {
        for seed in 0..20 {
            let (e, p) = random_instance(seed, 5, 3, 12);
            let r = po_update(&e, &p, seed + 100).unwrap();
            let eta = sample_noise(&p.gamma, 12, seed + 100).unwrap();
            let c_hat = cov_of_columns(e.members()).unwrap();
            let o = offset(
                &c_hat,
                &cov_of_columns(eta.members()).unwrap(),
                &cross_cov_of_columns(e.members(), eta.members()).unwrap(),
                &p,
            )
            .unwrap();
            let expect = cov_update(&c_hat, &p.a, &p.gamma).unwrap() + &o;
            assert!(rel_err(&r.sigma_hat, &expect) < 1e-9);
            let on = r.diagnostics.offset_norm.unwrap();
            assert!((on - operator_norm(&o).unwrap()).abs() <= 1e-9 * (1.0 + on));
        }
    }

    #[test]
    fn sr_scalar_and_no_data_cases() {
        // members {0, 2}/√2 give Ĉ = 1
        let s = 1.0 / 2f64.sqrt();
        let e = ens1(&[-s, s]);
        let p = LinearProblem::new(scalar(1.0), scalar(1.0), Vector::from_element(1, 0.3)).unwrap();
        for r in [etkf_update(&e, &p, None).unwrap(), eakf_update(&e, &p).unwrap()] {
            assert!((r.sigma_hat[(0, 0)] - 0.5).abs() < 1e-14);
        }

        let (e, _) = random_instance(9, 4, 2, 7);
        let p = LinearProblem::new(Matrix::zeros(2, 4), Matrix::identity(2, 2), Vector::zeros(2))
            .unwrap();
        let c_hat = cov_of_columns(e.members()).unwrap();
        for r in [etkf_update(&e, &p, None).unwrap(), eakf_update(&e, &p).unwrap()] {
            assert!(rel_err(&r.sigma_hat, &c_hat) < 1e-12);
            // Ĉ^{1/2} 1 = 0 makes the backed-out ensemble reproduce Ĉ
            assert!(rel_err(&cov_of_columns(r.ensemble.members()).unwrap(), &c_hat) < 1e-8);
        }
    }

    #[test]
    fn sr_consistency_and_agreement() {
        for seed in 0..50 {
            let (e, p) = random_instance(seed, 6, 4, 5 + (seed as usize % 9));
            let c_hat = cov_of_columns(e.members()).unwrap();
            let target = cov_update(&c_hat, &p.a, &p.gamma).unwrap();
            let t = etkf_update(&e, &p, None).unwrap();
            let a = eakf_update(&e, &p).unwrap();
            assert!(rel_err(&t.sigma_hat, &target) < 1e-8);
            assert!(rel_err(&a.sigma_hat, &target) < 1e-8);
            assert!(rel_err(&a.sigma_hat, &t.sigma_hat) < 1e-8);
            let mu = mean_update(&mean_of_columns(e.members()), &c_hat, &p).unwrap();
            assert!((&t.mu_hat - &mu).amax() <= 1e-12 * (1.0 + mu.amax()));
            assert!((&a.mu_hat - &mu).amax() <= 1e-12 * (1.0 + mu.amax()));
            assert!(a.diagnostics.mean_drift.unwrap() < 1e-10);
        }
    }

    #[test]
    fn etkf_invariant_to_orthogonal_u() {
        let (e, p) = random_instance(17, 5, 3, 9);
        let base = etkf_update(&e, &p, None).unwrap();
        let mut rng = rng_from_seed(4);
        for _ in 0..5 {
            let g = Matrix::from_fn(9, 9, |_, _| rng.random_range(-1.0..1.0));
            let q = g.qr().q();
            let r = etkf_update(&e, &p, Some(&q)).unwrap();
            assert!(rel_err(&r.sigma_hat, &base.sigma_hat) < 1e-10);
        }
        let not_orth = Matrix::identity(9, 9) * 2.0;
        assert!(matches!(
            etkf_update(&e, &p, Some(&not_orth)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn eakf_matches_explicit_adjustment_matrix() {
        let (e, p) = random_instance(23, 4, 2, 6);
        let x = ensemble_sqrt(&e);
        let gamma_inv_sqrt = crate::matrix::psd_eig(&p.gamma)
            .unwrap()
            .map_spectrum(|l| 1.0 / l.sqrt());
        let m = (&p.a * &x).transpose() * gamma_inv_sqrt;
        let inner = Matrix::identity(6, 6) + &m * m.transpose();
        let inv_sqrt = sym_eig(&symmetrize(inner))
            .unwrap()
            .map_spectrum(|l| 1.0 / l.sqrt());
        let b = &x * &inv_sqrt * pseudo_inverse(&x, None).unwrap();
        let via_b = &b * &x;
        let direct = &x * inv_sqrt;
        let fast = adjust_factor(&x, &whitened_obs(&x, &p).unwrap()).unwrap();
        assert!(rel_err(&via_b, &direct) < 1e-10);
        assert!(rel_err(&fast, &direct) < 1e-10);
    }

    #[test]
    fn backout_examples() {
        let mu = Vector::from_vec(vec![1.0, -1.0]);
        let (e, drift) = sr_backout(&Matrix::zeros(2, 3), &mu).unwrap();
        assert_eq!(drift, 0.0);
        for n in 0..3 {
            assert_eq!(e.member(n), mu);
        }
        let v = Vector::from_vec(vec![0.5, 2.0]);
        let f = Matrix::from_columns(&[v.clone(), -v.clone()]);
        let (e, _) = sr_backout(&f, &mu).unwrap();
        assert_eq!(e.member(0), &mu + &v);
        assert_eq!(e.member(1), &mu - &v);
        let c = cov_of_columns(e.members()).unwrap();
        assert!(rel_err(&c, &(&v * v.transpose() * 2.0)) < 1e-15);
    }

    #[test]
    fn localized_po_limits() {
        let (e, p) = random_instance(31, 5, 3, 10);
        let plain = po_update(&e, &p, 77).unwrap();
        let zero = localized_po_update(&e, &p, &LocalizationConfig::Explicit { radius: 0.0 }, 77)
            .unwrap();
        assert!(rel_err(zero.ensemble.members(), plain.ensemble.members()) < 1e-10);
        assert_eq!(zero.diagnostics.radius_used, Some(0.0));

        let big = max_norm(&cov_of_columns(e.members()).unwrap()).unwrap() + 1.0;
        let r = localized_po_update(&e, &p, &LocalizationConfig::Explicit { radius: big }, 77)
            .unwrap();
        assert_eq!(r.ensemble.members(), e.members());
    }

    #[test]
    fn localized_sr_limits() {
        let (e, p) = random_instance(37, 5, 3, 10);
        let plain = etkf_update(&e, &p, None).unwrap();
        let zero = localized_sr_update(&e, &p, &LocalizationConfig::Explicit { radius: 0.0 }).unwrap();
        assert!(rel_err(&zero.sigma_hat, &plain.sigma_hat) < 1e-8);
        assert!((&zero.mu_hat - &plain.mu_hat).amax() < 1e-10);
        let members_cov = cov_of_columns(zero.ensemble.members()).unwrap();
        assert!(rel_err(&members_cov, &plain.sigma_hat) < 1e-8);

        let big = max_norm(&cov_of_columns(e.members()).unwrap()).unwrap() + 1.0;
        let r = localized_sr_update(&e, &p, &LocalizationConfig::Explicit { radius: big }).unwrap();
        assert_eq!(max_norm(&r.sigma_hat).unwrap(), 0.0);
        let m_hat = mean_of_columns(e.members());
        assert!((&r.mu_hat - m_hat).amax() < 1e-15);
    }
}
