//! Ensemble Kalman inversion: EKI, localized EKI, the mean-field update,
//! statistical linearization and the associated objectives.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimators::{
    cov_of_columns, cross_cov_of_columns, localized_cov, mean_of_columns, threshold,
};
use crate::matrix::{ensure_finite_vec, pseudo_inverse, symmetrize, Matrix, Vector};
use crate::models::{sample_noise, Ensemble, ForwardMap, GaussianPrior, GaussianSampler};
use crate::operators::nonlinear_gain;
use crate::rng::{derive_seed, rng_from_seed};
use crate::updates::{Diagnostics, UpdateResult};

/// Data-misfit minimization problem `½‖Γ^{−1/2}(y − G(u))‖²`.
#[derive(Debug, Clone)]
pub struct EkiProblem {
    pub forward: Arc<dyn ForwardMap>,
    pub gamma: Matrix,
    pub y: Vector,
    pub alpha: f64,
    gamma_chol: Matrix,
}

impl EkiProblem {
    pub fn new(forward: Arc<dyn ForwardMap>, gamma: Matrix, y: Vector) -> Result<Self> {
        Self::with_alpha(forward, gamma, y, 1.0)
    }

    pub fn with_alpha(
        forward: Arc<dyn ForwardMap>,
        gamma: Matrix,
        y: Vector,
        alpha: f64,
    ) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::invalid(format!("alpha must be > 0, got {alpha}")));
        }
        ensure_finite_vec(&y, "y")?;
        let k = forward.output_dim();
        if y.len() != k || gamma.shape() != (k, k) {
            return Err(Error::dims(format!(
                "forward map has output dimension {k}; y has length {} and Gamma is {}x{}",
                y.len(),
                gamma.nrows(),
                gamma.ncols()
            )));
        }
        let gamma_chol = crate::matrix::cholesky_pd(&gamma)
            .map_err(|_| Error::NotPositiveDefinite("Gamma".into()))?;
        Ok(Self {
            forward,
            gamma,
            y,
            alpha,
            gamma_chol,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.forward.input_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.forward.output_dim()
    }

    /// `‖Γ^{−1/2} r‖²` through the Cholesky factor of `Γ`.
    fn whitened_sq(&self, r: &Vector) -> f64 {
        let z = self
            .gamma_chol
            .solve_lower_triangular(r)
            .expect("Cholesky factor has a positive diagonal");
        z.norm_squared()
    }
}

/// Population moments `C^{up}`, `C^{pp}` and `E[G(u)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationMoments {
    pub c_up: Matrix,
    pub c_pp: Matrix,
    pub mean_g: Vector,
}

/// `½‖Γ^{−1/2}(y − G(u))‖²`.
pub fn data_misfit(u: &Vector, prob: &EkiProblem) -> Result<f64> {
    if u.len() != prob.state_dim() {
        return Err(Error::dims("u must have the input dimension of the forward map"));
    }
    let r = &prob.y - prob.forward.evaluate(u);
    Ok(0.5 * prob.whitened_sq(&r))
}

/// Linearized objective
/// `½‖Γ^{−1/2}(y − η_n − G(u_n) − Gw)‖² + (1/2α) wᵀĈ⁺w`.
pub fn lm_objective(
    w: &Vector,
    u_n: &Vector,
    eta_n: &Vector,
    g_mat: &Matrix,
    c_hat: &Matrix,
    prob: &EkiProblem,
) -> Result<f64> {
    let (d, k) = (prob.state_dim(), prob.obs_dim());
    if w.len() != d || u_n.len() != d || eta_n.len() != k || g_mat.shape() != (k, d) {
        return Err(Error::dims("lm_objective arguments have inconsistent dimensions"));
    }
    if c_hat.shape() != (d, d) {
        return Err(Error::dims("C_hat must be d x d"));
    }
    let r = &prob.y - eta_n - prob.forward.evaluate(u_n) - g_mat * w;
    let c_pinv = pseudo_inverse(c_hat, None)?;
    let quad = w.dot(&(c_pinv * w));
    Ok(0.5 * prob.whitened_sq(&r) + quad / (2.0 * prob.alpha))
}

/// `(Ĉ^{up})ᵀ Ĉ⁺`, the ensemble proxy for the Jacobian of `G`.
pub fn statistical_linearization(e: &Ensemble, g_values: &Ensemble) -> Result<Matrix> {
    let c_up = cross_cov_of_columns(e.members(), g_values.members())?;
    let c_hat = cov_of_columns(e.members())?;
    Ok(c_up.transpose() * pseudo_inverse(&c_hat, None)?)
}

fn check_ensemble(e: &Ensemble, prob: &EkiProblem) -> Result<()> {
    if e.dim() != prob.state_dim() {
        return Err(Error::dims(format!(
            "ensemble dimension {} does not match the forward map input dimension {}",
            e.dim(),
            prob.state_dim()
        )));
    }
    Ok(())
}

fn apply_gain(u: &Matrix, g: &Matrix, gain: &Matrix, prob: &EkiProblem, eta: &Matrix) -> Matrix {
    let mut innov = -g - eta;
    for mut col in innov.column_iter_mut() {
        col += &prob.y;
    }
    u + gain * innov
}

fn eki_core(
    e: &Ensemble,
    prob: &EkiProblem,
    eta: &Matrix,
    radii: Option<(f64, f64)>,
) -> Result<UpdateResult> {
    check_ensemble(e, prob)?;
    if eta.shape() != (prob.obs_dim(), e.size()) {
        return Err(Error::dims(format!(
            "perturbations must be {}x{}",
            prob.obs_dim(),
            e.size()
        )));
    }
    let u = e.members();
    let g = prob.forward.evaluate_columns(u);
    let mut c_up = cross_cov_of_columns(u, &g)?;
    let mut c_pp = cov_of_columns(&g)?;
    if let Some((rho_up, rho_pp)) = radii {
        c_up = threshold(&c_up, rho_up)?;
        c_pp = localized_cov(&c_pp, rho_pp)?;
    }
    let gain = nonlinear_gain(&c_up, &c_pp, &prob.gamma, prob.alpha)?;
    let updated = apply_gain(u, &g, &gain, prob, eta);
    let mu_hat = mean_of_columns(&updated);
    let sigma_hat = cov_of_columns(&updated)?;
    Ok(UpdateResult {
        ensemble: Ensemble::new(updated)?,
        mu_hat,
        sigma_hat,
        diagnostics: Diagnostics {
            offset_norm: None,
            gain,
            radius_used: radii.map(|(r, _)| r),
            mean_drift: None,
        },
    })
}

/// `υ_n = u_n + 𝒫(Ĉ^{up}, Ĉ^{pp})(y − G(u_n) − η_n)` with fresh `η_n ~ N(0, Γ)`.
pub fn eki_update(e: &Ensemble, prob: &EkiProblem, seed: u64) -> Result<UpdateResult> {
    let eta = sample_noise(&prob.gamma, e.size(), seed)?;
    eki_core(e, prob, eta.members(), None)
}

pub fn eki_update_with_perturbations(
    e: &Ensemble,
    prob: &EkiProblem,
    eta: &Matrix,
) -> Result<UpdateResult> {
    eki_core(e, prob, eta, None)
}

/// EKI with `Ĉ^{up}` thresholded at `rho_up` and `Ĉ^{pp}` replaced by
/// `positive_part(threshold(Ĉ^{pp}, rho_pp))`.
pub fn leki_update(
    e: &Ensemble,
    prob: &EkiProblem,
    rho_up: f64,
    rho_pp: f64,
    seed: u64,
) -> Result<UpdateResult> {
    let eta = sample_noise(&prob.gamma, e.size(), seed)?;
    eki_core(e, prob, eta.members(), Some((rho_up, rho_pp)))
}

pub fn leki_update_with_perturbations(
    e: &Ensemble,
    prob: &EkiProblem,
    rho_up: f64,
    rho_pp: f64,
    eta: &Matrix,
) -> Result<UpdateResult> {
    eki_core(e, prob, eta, Some((rho_up, rho_pp)))
}

/// `υ*_n = u_n + 𝒫(C^{up}, C^{pp})(y − G(u_n) − η_n)` with population moments.
pub fn mean_field_update(
    u_n: &Vector,
    eta_n: &Vector,
    pop: &PopulationMoments,
    prob: &EkiProblem,
) -> Result<Vector> {
    if u_n.len() != prob.state_dim() || eta_n.len() != prob.obs_dim() {
        return Err(Error::dims("u_n / eta_n dimensions do not match the problem"));
    }
    let gain = nonlinear_gain(&pop.c_up, &pop.c_pp, &prob.gamma, prob.alpha)?;
    Ok(u_n + gain * (&prob.y - prob.forward.evaluate(u_n) - eta_n))
}

/// Closed-form moments for `G(u) = Au`: `(CAᵀ, ACAᵀ, Am)`.
pub fn population_moments_linear(prior: &GaussianPrior, a: &Matrix) -> Result<PopulationMoments> {
    if a.ncols() != prior.dim() {
        return Err(Error::dims(format!(
            "A has {} columns but the prior has dimension {}",
            a.ncols(),
            prior.dim()
        )));
    }
    let c_up = &prior.cov * a.transpose();
    let c_pp = symmetrize(a * &c_up);
    Ok(PopulationMoments {
        c_up,
        c_pp,
        mean_g: a * &prior.mean,
    })
}

/// Samples drawn per chunk by [`population_moments_mc`].
pub const MC_CHUNK: usize = 10_000;

/// Running first and centered second moments of `(u, G(u))`.
struct Accumulator {
    n: f64,
    mean_u: Vector,
    mean_g: Vector,
    s_ug: Matrix,
    s_gg: Matrix,
}

impl Accumulator {
    fn from_chunk(u: &Matrix, g: &Matrix) -> Self {
        let mean_u = mean_of_columns(u);
        let mean_g = mean_of_columns(g);
        let mut du = u.clone();
        for mut c in du.column_iter_mut() {
            c -= &mean_u;
        }
        let mut dg = g.clone();
        for mut c in dg.column_iter_mut() {
            c -= &mean_g;
        }
        Self {
            n: u.ncols() as f64,
            s_ug: &du * dg.transpose(),
            s_gg: &dg * dg.transpose(),
            mean_u,
            mean_g,
        }
    }

    /// Pairwise merge of centered sums.
    fn merge(self, other: Self) -> Self {
        let n = self.n + other.n;
        let du = &other.mean_u - &self.mean_u;
        let dg = &other.mean_g - &self.mean_g;
        let w = self.n * other.n / n;
        Self {
            mean_u: &self.mean_u + &du * (other.n / n),
            mean_g: &self.mean_g + &dg * (other.n / n),
            s_ug: self.s_ug + other.s_ug + &du * dg.transpose() * w,
            s_gg: self.s_gg + other.s_gg + &dg * dg.transpose() * w,
            n,
        }
    }
}

/// Monte Carlo moments from `n_ref` prior draws (standard error of order
/// `n_ref^{−1/2}`), computed in chunks of [`MC_CHUNK`] samples each with its
/// own derived seed.
pub fn population_moments_mc(
    prior: &GaussianPrior,
    forward: &dyn ForwardMap,
    n_ref: usize,
    seed: u64,
) -> Result<PopulationMoments> {
    if n_ref < 2 {
        return Err(Error::invalid("n_ref must be at least 2"));
    }
    if forward.input_dim() != prior.dim() {
        return Err(Error::dims("forward map input dimension differs from the prior"));
    }
    let sampler = GaussianSampler::new(prior)?;
    let chunks = n_ref.div_ceil(MC_CHUNK);
    let parts: Vec<Accumulator> = (0..chunks)
        .into_par_iter()
        .map(|i| {
            let size = MC_CHUNK.min(n_ref - i * MC_CHUNK);
            let mut rng = rng_from_seed(derive_seed(seed, i as u64));
            let u = sampler.sample(size, &mut rng);
            let g = forward.evaluate_columns(&u);
            Accumulator::from_chunk(&u, &g)
        })
        .collect();
    let total = parts
        .into_iter()
        .reduce(Accumulator::merge)
        .expect("at least one chunk");
    let denom = total.n - 1.0;
    Ok(PopulationMoments {
        c_up: total.s_ug / denom,
        c_pp: symmetrize(total.s_gg / denom),
        mean_g: total.mean_g,
    })
}

/// Gain `𝒫(C^{up}, C^{pp})` of a moment set.
pub fn population_gain(pop: &PopulationMoments, prob: &EkiProblem) -> Result<Matrix> {
    nonlinear_gain(&pop.c_up, &pop.c_pp, &prob.gamma, prob.alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{max_norm, operator_norm};
    use crate::models::{sample_ensemble, LinearMap, TanhFixture};
    use crate::operators::{kalman_gain, LinearProblem};
    use crate::rng::rng_from_seed;
    use crate::updates::po_update_with_perturbations;
    use rand::Rng as _;

    fn scalar_problem(y: f64, gamma: f64) -> EkiProblem {
        let map = LinearMap::new(Matrix::from_element(1, 1, 1.0)).unwrap();
        EkiProblem::new(
            Arc::new(map),
            Matrix::from_element(1, 1, gamma),
            Vector::from_element(1, y),
        )
        .unwrap()
    }

    fn random_linear(seed: u64, d: usize, k: usize, n: usize) -> (Ensemble, EkiProblem, LinearProblem) {
        let mut rng = rng_from_seed(seed);
        let g = Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let c = symmetrize(&g * g.transpose() + Matrix::identity(d, d) * 0.1);
        let a = Matrix::from_fn(k, d, |_, _| rng.random_range(-1.0..1.0));
        let gamma = Matrix::from_diagonal(&Vector::from_fn(k, |_, _| rng.random_range(0.3..1.5)));
        let y = Vector::from_fn(k, |_, _| rng.random_range(-2.0..2.0));
        let prior = GaussianPrior::new(Vector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)), c)
            .unwrap();
        let e = sample_ensemble(&prior, n, seed + 1).unwrap();
        let eki = EkiProblem::new(Arc::new(LinearMap::new(a.clone()).unwrap()), gamma.clone(), y.clone())
            .unwrap();
        (e, eki, LinearProblem::new(a, gamma, y).unwrap())
    }

    #[test]
    fn misfit_examples() {
        let p = scalar_problem(2.0, 1.0);
        assert_eq!(data_misfit(&Vector::from_element(1, 2.0), &p).unwrap(), 0.0);
        assert!((data_misfit(&Vector::zeros(1), &p).unwrap() - 2.0).abs() < 1e-15);
        let p = scalar_problem(2.0, 4.0);
        assert!((data_misfit(&Vector::zeros(1), &p).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn lm_objective_examples() {
        let p = scalar_problem(3.0, 1.0);
        let one = Matrix::from_element(1, 1, 1.0);
        let u = Vector::zeros(1);
        let eta = Vector::from_element(1, 0.5);
        // residual r = 3 − 0.5 − 0 = 2.5
        let v0 = lm_objective(&Vector::zeros(1), &u, &eta, &one, &one, &p).unwrap();
        assert!((v0 - 0.5 * 2.5 * 2.5).abs() < 1e-14);
        let half = Vector::from_element(1, 1.25);
        let v = lm_objective(&half, &u, &eta, &one, &one, &p).unwrap();
        assert!((v - 2.5 * 2.5 / 4.0).abs() < 1e-14);
    }

    #[test]
    fn eki_gain_minimizes_linearized_objective() {
        let mut rng = rng_from_seed(8);
        for seed in 0..10 {
            let (e, eki, lp) = random_linear(seed, 4, 3, 12);
            let c_hat = cov_of_columns(e.members()).unwrap();
            let eta = sample_noise(&lp.gamma, 12, seed + 50).unwrap();
            let r = eki_update_with_perturbations(&e, &eki, eta.members()).unwrap();
            for n in 0..3 {
                let u_n = e.member(n);
                let eta_n = eta.member(n);
                let w = r.ensemble.member(n) - &u_n;
                let best = lm_objective(&w, &u_n, &eta_n, &lp.a, &c_hat, &eki).unwrap();
                for _ in 0..100 {
                    let delta = Vector::from_fn(4, |_, _| rng.random_range(-1e-2..1e-2));
                    let other = lm_objective(&(&w + delta), &u_n, &eta_n, &lp.a, &c_hat, &eki)
                        .unwrap();
                    assert!(best <= other + 1e-12);
                }
            }
        }
    }

    #[test]
    fn statistical_linearization_examples() {
        let (e, _, lp) = random_linear(2, 3, 2, 20);
        let g = Ensemble::new(&lp.a * e.members()).unwrap();
        let lin = statistical_linearization(&e, &g).unwrap();
        assert!(max_norm(&(lin - &lp.a)).unwrap() < 1e-8);

        let constant = Ensemble::new(Matrix::from_element(2, 20, 4.0)).unwrap();
        let lin = statistical_linearization(&e, &constant).unwrap();
        assert!(max_norm(&lin).unwrap() < 1e-12);
    }

    #[test]
    fn statistical_linearization_tracks_mean_jacobian() {
        let fixture = TanhFixture::new(3, 3).unwrap();
        let prior = GaussianPrior::centered(Matrix::identity(3, 3)).unwrap();
        let e = sample_ensemble(&prior, 10_000, 41).unwrap();
        let g = Ensemble::new(fixture.evaluate_columns(e.members())).unwrap();
        let lin = statistical_linearization(&e, &g).unwrap();

        // oracle: average the analytic Jacobian over 10^6 independent draws
        let reference = sample_ensemble(&prior, 1_000_000, 42).unwrap();
        let mut jac = Matrix::zeros(3, 3);
        for col in reference.members().column_iter() {
            jac += fixture.jacobian(&col.into_owned()).unwrap();
        }
        jac /= 1_000_000.0;
        assert!(max_norm(&(lin - jac)).unwrap() < 0.05);
    }

    #[test]
    fn eki_examples() {
        // zero innovation leaves the ensemble unchanged
        let (e, _, lp) = random_linear(4, 3, 3, 6);
        let g = &lp.a * e.members();
        let y = Vector::from_element(3, 0.7);
        // η_n = y − G(u_n)
        let eta = Matrix::from_fn(3, 6, |i, _| y[i]) - &g;
        let eki = EkiProblem::new(Arc::new(LinearMap::new(lp.a.clone()).unwrap()), lp.gamma.clone(), y)
            .unwrap();
        let r = eki_update_with_perturbations(&e, &eki, &eta).unwrap();
        assert!(max_norm(&(r.ensemble.members() - e.members())).unwrap() < 1e-12);

        // scalar: Cup = Cpp = 1, Γ = 1, y = 2, η = 0 → gain 1/2, υ = 1 for u = 0
        let p = scalar_problem(2.0, 1.0);
        let s = 1.0 / 2f64.sqrt();
        let e = Ensemble::new(Matrix::from_row_slice(1, 2, &[-s, s])).unwrap();
        let r = eki_update_with_perturbations(&e, &p, &Matrix::zeros(1, 2)).unwrap();
        assert!((r.diagnostics.gain[(0, 0)] - 0.5).abs() < 1e-14);
        let pop = PopulationMoments {
            c_up: Matrix::from_element(1, 1, 1.0),
            c_pp: Matrix::from_element(1, 1, 1.0),
            mean_g: Vector::zeros(1),
        };
        let v = mean_field_update(&Vector::zeros(1), &Vector::zeros(1), &pop, &p).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-15);
        let v = mean_field_update(&Vector::from_element(1, 2.0), &Vector::zeros(1), &pop, &p).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn linear_eki_equals_po() {
        for seed in 0..20 {
            let (e, eki, lp) = random_linear(seed, 5, 4, 9);
            let eta = sample_noise(&lp.gamma, 9, seed * 3 + 1).unwrap();
            let a = eki_update_with_perturbations(&e, &eki, eta.members()).unwrap();
            let b = po_update_with_perturbations(&e, &lp, eta.members()).unwrap();
            let scale = 1.0 + max_norm(b.ensemble.members()).unwrap();
            assert!(max_norm(&(a.ensemble.members() - b.ensemble.members())).unwrap() <= 1e-10 * scale);
        }
    }

    #[test]
    fn leki_limits() {
        let fixture = TanhFixture::new(6, 4).unwrap();
        let prior = GaussianPrior::centered(Matrix::identity(6, 6)).unwrap();
        let e = sample_ensemble(&prior, 30, 5).unwrap();
        let p = EkiProblem::new(Arc::new(fixture), Matrix::identity(4, 4), Vector::from_element(4, 0.3))
            .unwrap();
        let a = eki_update(&e, &p, 9).unwrap();
        let b = leki_update(&e, &p, 0.0, 0.0, 9).unwrap();
        assert!(max_norm(&(a.ensemble.members() - b.ensemble.members())).unwrap() < 1e-10);
        let c = leki_update(&e, &p, 1e6, 1e6, 9).unwrap();
        assert_eq!(c.ensemble.members(), e.members());
    }

    #[test]
    fn population_moment_examples() {
        let c = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 4.0]);
        let prior = GaussianPrior::centered(c.clone()).unwrap();
        let m = population_moments_linear(&prior, &Matrix::identity(2, 2)).unwrap();
        assert_eq!((m.c_up.clone(), m.c_pp.clone()), (c.clone(), c.clone()));
        let m = population_moments_linear(&prior, &Matrix::zeros(2, 2)).unwrap();
        assert_eq!(max_norm(&m.c_up).unwrap() + max_norm(&m.c_pp).unwrap(), 0.0);
        let m = population_moments_linear(&prior, &Matrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        assert_eq!(m.c_up, Matrix::from_column_slice(2, 1, &[1.0, 0.0]));
        assert_eq!(m.c_pp[(0, 0)], 1.0);

        // the linear-moment gain is the Kalman gain
        let gamma = Matrix::from_element(1, 1, 0.5);
        let a = Matrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let m = population_moments_linear(&prior, &a).unwrap();
        let p = EkiProblem::new(Arc::new(LinearMap::new(a.clone()).unwrap()), gamma.clone(), Vector::zeros(1))
            .unwrap();
        let k = kalman_gain(&c, &a, &gamma).unwrap();
        assert!(max_norm(&(population_gain(&m, &p).unwrap() - k)).unwrap() < 1e-14);
    }

    #[test]
    fn monte_carlo_moments() {
        let c = Matrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.3, 0.0, 0.3, 1.5]);
        let prior = GaussianPrior::new(Vector::from_vec(vec![1.0, 0.0, -1.0]), c).unwrap();
        let a = Matrix::from_row_slice(2, 3, &[1.0, -1.0, 0.5, 0.0, 2.0, 1.0]);
        let map = LinearMap::new(a.clone()).unwrap();
        let exact = population_moments_linear(&prior, &a).unwrap();
        let mc = population_moments_mc(&prior, &map, 1_000_000, 3).unwrap();
        let rel = |x: &Matrix, y: &Matrix| operator_norm(&(x - y)).unwrap() / operator_norm(y).unwrap();
        assert!(rel(&mc.c_up, &exact.c_up) < 0.01);
        assert!(rel(&mc.c_pp, &exact.c_pp) < 0.01);

        let again = population_moments_mc(&prior, &map, 30_000, 3).unwrap();
        assert_eq!(again, population_moments_mc(&prior, &map, 30_000, 3).unwrap());

        let zero = crate::models::FnMap::new(3, 2, |_| Vector::from_element(2, 5.0));
        let m = population_moments_mc(&prior, &zero, 20_000, 1).unwrap();
        assert_eq!(max_norm(&m.c_up).unwrap(), 0.0);
        assert_eq!(max_norm(&m.c_pp).unwrap(), 0.0);
    }
}
