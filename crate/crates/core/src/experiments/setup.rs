//! Problem instances shared by all trials of an experiment.

use std::sync::Arc;

use rand::Rng as _;

use super::{ExperimentKind, ExperimentSpec, ForwardSpec};
use crate::eki::{
    mean_field_update, population_gain, population_moments_linear, EkiProblem,
    PopulationMoments,
};
use crate::error::{Error, Result};
use crate::estimators::{effective_dims, EffectiveDims};
use crate::filter::{kalman_filter, FilterProblem, FilterStep, FilterTrace};
use crate::matrix::{Matrix, Vector};
use crate::models::{
    make_covariance, standard_normal_matrix, CovarianceSpec, ForwardMap, GaussianPrior,
    GaussianSampler, LinearMap, TanhFixture,
};
use crate::operators::LinearProblem;
use crate::oracle::{exact_posterior, mean_field_reference};
use crate::rng::{derive_seed, fnv1a, rng_from_seed, stream, Rng};

pub(super) struct LinearSetup {
    pub r2_label: Option<f64>,
    pub dims: EffectiveDims,
    pub sampler: GaussianSampler,
    pub problem: LinearProblem,
    pub post_mean: Vector,
    pub post_cov: Matrix,
}

pub(super) struct CovSetup {
    pub mean: Vector,
    pub cov: Matrix,
    pub dims: EffectiveDims,
    pub sampler: GaussianSampler,
}

pub(super) struct EkiSetup {
    pub prob: EkiProblem,
    pub sampler: GaussianSampler,
    pub noise: GaussianSampler,
    pub dims_c: EffectiveDims,
    pub dims_pp: EffectiveDims,
    pub gain: Matrix,
    pub u_fixed: Vector,
    pub eta_fixed: Vector,
    pub target: Vector,
}

pub(super) struct FilterSetup {
    pub fp: FilterProblem,
    pub reference: FilterTrace,
    pub dims: EffectiveDims,
}

pub(super) enum Family {
    Linear(Vec<LinearSetup>),
    Covariance(CovSetup),
    Eki(Box<EkiSetup>),
    Filter(FilterSetup),
    /// Random instances with `d <= dmax`, `k <= kmax`.
    Checks { dmax: usize, kmax: usize },
    Sparsity,
}

impl Family {
    pub fn setup_count(&self) -> usize {
        match self {
            Family::Linear(v) => v.len(),
            _ => 1,
        }
    }
}

/// Seed of the per-experiment problem instance.
pub(super) fn problem_seed(spec: &ExperimentSpec) -> u64 {
    derive_seed(
        derive_seed(spec.master_seed, fnv1a(spec.id.as_bytes())),
        stream::PROBLEM,
    )
}

enum Forward {
    Linear(Matrix),
    Nonlinear(Arc<dyn ForwardMap>),
}

fn build_forward(spec: &ForwardSpec, d: usize, rng: &mut Rng) -> Result<Forward> {
    Ok(match spec {
        ForwardSpec::Identity => Forward::Linear(Matrix::identity(d, d)),
        ForwardSpec::Gaussian { k } => {
            check_k(*k)?;
            Forward::Linear(standard_normal_matrix(*k, d, rng) / (d as f64).sqrt())
        }
        ForwardSpec::Banded { k, bandwidth } => {
            check_k(*k)?;
            let mut a = Matrix::zeros(*k, d);
            for i in 0..*k {
                for j in 0..d {
                    let gap = i.abs_diff(j);
                    if gap == 0 {
                        a[(i, j)] = 1.0;
                    } else if gap <= *bandwidth {
                        a[(i, j)] = rng.random_range(-0.5..0.5);
                    }
                }
            }
            Forward::Linear(a)
        }
        ForwardSpec::Tanh { k } => Forward::Nonlinear(Arc::new(TanhFixture::new(d, *k)?)),
        ForwardSpec::Matrix { matrix } => {
            let k = matrix.len();
            if k == 0 || matrix.iter().any(|r| r.len() != d) {
                return Err(Error::invalid(format!(
                    "problem.forward.matrix: must be a non-empty k x {d} array"
                )));
            }
            Forward::Linear(Matrix::from_fn(k, d, |i, j| matrix[i][j]))
        }
    })
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("problem.forward.k: must be >= 1"));
    }
    Ok(())
}

fn prior_from(spec: &ExperimentSpec, cov_spec: &CovarianceSpec) -> Result<GaussianPrior> {
    let cov = make_covariance(cov_spec)?;
    let d = cov.nrows();
    let mean = match &spec.problem.prior_mean {
        Some(m) if m.len() != d => {
            return Err(Error::invalid(format!(
                "problem.prior_mean: expected length {d}, got {}",
                m.len()
            )))
        }
        Some(m) => Vector::from_vec(m.clone()),
        None => Vector::zeros(d),
    };
    GaussianPrior::new(mean, cov)
}

fn noise_cov(spec: &ExperimentSpec, k: usize) -> Result<Matrix> {
    match &spec.problem.noise {
        None => Ok(Matrix::identity(k, k)),
        Some(s) if s.dim() != k => Err(Error::invalid(format!(
            "problem.noise: dimension {} does not match the observation dimension {k}",
            s.dim()
        ))),
        Some(s) => make_covariance(s),
    }
}

fn draw(sampler: &GaussianSampler, rng: &mut Rng) -> Vector {
    sampler.sample(1, rng).column(0).into_owned()
}

pub(super) fn build(spec: &ExperimentSpec) -> Result<Family> {
    let d = spec.problem.covariance.dim();
    match spec.kind {
        ExperimentKind::MeanRate
        | ExperimentKind::CovRate
        | ExperimentKind::BoundOverlay
        | ExperimentKind::PoVsSr
        | ExperimentKind::EffectiveDim => {
            let covs: Vec<(Option<f64>, CovarianceSpec)> = if spec.options.r2_grid.is_empty() {
                vec![(None, spec.problem.covariance.clone())]
            } else {
                spec.options
                    .r2_grid
                    .iter()
                    .map(|&r2| (Some(r2), CovarianceSpec::GeometricSpectrum { dim: d, r2 }))
                    .collect()
            };
            covs.iter()
                .map(|(label, cs)| linear_setup(spec, cs, *label))
                .collect::<Result<Vec<_>>>()
                .map(Family::Linear)
        }
        ExperimentKind::LocVsSample | ExperimentKind::PositivePart | ExperimentKind::RadiusSweep => {
            let prior = prior_from(spec, &spec.problem.covariance)?;
            Ok(Family::Covariance(CovSetup {
                dims: effective_dims(&prior.cov)?,
                sampler: GaussianSampler::new(&prior)?,
                mean: prior.mean,
                cov: prior.cov,
            }))
        }
        ExperimentKind::EkiMeanfield | ExperimentKind::LekiVsEki => {
            eki_setup(spec).map(|s| Family::Eki(Box::new(s)))
        }
        ExperimentKind::MultistepRate => filter_setup(spec).map(Family::Filter),
        ExperimentKind::Exactness
        | ExperimentKind::SrConsistency
        | ExperimentKind::PoIdentity
        | ExperimentKind::EkiPoEquivalence => {
            let kmax = spec.problem.forward.obs_dim(d);
            if d == 0 || kmax == 0 {
                return Err(Error::invalid("problem: dimensions must be >= 1"));
            }
            Ok(Family::Checks { dmax: d, kmax })
        }
        ExperimentKind::SparsityPropagation => Ok(Family::Sparsity),
        ExperimentKind::Determinism => Err(Error::invalid("determinism has no problem setup")),
    }
}

fn linear_setup(
    spec: &ExperimentSpec,
    cov_spec: &CovarianceSpec,
    r2_label: Option<f64>,
) -> Result<LinearSetup> {
    let prior = prior_from(spec, cov_spec)?;
    let d = prior.dim();
    let mut rng = rng_from_seed(problem_seed(spec));
    let a = match build_forward(&spec.problem.forward, d, &mut rng)? {
        Forward::Linear(a) => a,
        Forward::Nonlinear(_) => {
            return Err(Error::invalid(
                "problem.forward: this experiment needs a linear forward map",
            ))
        }
    };
    let gamma = noise_cov(spec, a.nrows())?;
    let sampler = GaussianSampler::new(&prior)?;
    let noise = GaussianSampler::new(&GaussianPrior::centered(gamma.clone())?)?;
    let truth = draw(&sampler, &mut rng);
    let y = &a * truth + draw(&noise, &mut rng);
    let problem = LinearProblem::new(a, gamma, y)?;
    let (post_mean, post_cov) = exact_posterior(&prior.mean, &prior.cov, &problem)?;
    Ok(LinearSetup {
        r2_label,
        dims: effective_dims(&prior.cov)?,
        sampler,
        problem,
        post_mean,
        post_cov,
    })
}

fn eki_setup(spec: &ExperimentSpec) -> Result<EkiSetup> {
    let prior = prior_from(spec, &spec.problem.covariance)?;
    let d = prior.dim();
    let seed = problem_seed(spec);
    let mut rng = rng_from_seed(seed);
    let forward: Arc<dyn ForwardMap> = match build_forward(&spec.problem.forward, d, &mut rng)? {
        Forward::Linear(a) => Arc::new(LinearMap::new(a)?),
        Forward::Nonlinear(f) => f,
    };
    let gamma = noise_cov(spec, forward.output_dim())?;
    let sampler = GaussianSampler::new(&prior)?;
    let noise = GaussianSampler::new(&GaussianPrior::centered(gamma.clone())?)?;
    let truth = draw(&sampler, &mut rng);
    let y = forward.evaluate(&truth) + draw(&noise, &mut rng);
    let u_fixed = draw(&sampler, &mut rng);
    let eta_fixed = draw(&noise, &mut rng);
    let pop: PopulationMoments = match forward.linear_matrix() {
        Some(a) => population_moments_linear(&prior, &a)?,
        None => mean_field_reference(
            &prior,
            forward.as_ref(),
            spec.options.n_ref,
            derive_seed(seed, stream::ORACLE),
        )?,
    };
    let prob = EkiProblem::new(forward, gamma, y)?;
    let target = mean_field_update(&u_fixed, &eta_fixed, &pop, &prob)?;
    Ok(EkiSetup {
        gain: population_gain(&pop, &prob)?,
        dims_c: effective_dims(&prior.cov)?,
        dims_pp: effective_dims(&pop.c_pp)?,
        prob,
        sampler,
        noise,
        u_fixed,
        eta_fixed,
        target,
    })
}

fn filter_setup(spec: &ExperimentSpec) -> Result<FilterSetup> {
    let prior = prior_from(spec, &spec.problem.covariance)?;
    let d = prior.dim();
    let mut rng = rng_from_seed(problem_seed(spec));
    let a = match build_forward(&spec.problem.forward, d, &mut rng)? {
        Forward::Linear(a) => a,
        Forward::Nonlinear(_) => {
            return Err(Error::invalid(
                "problem.forward: filtering needs a linear observation operator",
            ))
        }
    };
    let gamma = noise_cov(spec, a.nrows())?;
    let q = standard_normal_matrix(d, d, &mut rng).qr().q();
    let m = q * spec.options.dynamics_scale;
    let sampler = GaussianSampler::new(&prior)?;
    let noise = GaussianSampler::new(&GaussianPrior::centered(gamma.clone())?)?;
    let mut state = draw(&sampler, &mut rng);
    let mut steps = Vec::with_capacity(spec.options.horizon);
    for _ in 0..spec.options.horizon {
        state = &m * state;
        let y = &a * &state + draw(&noise, &mut rng);
        steps.push(FilterStep {
            dynamics: m.clone(),
            obs: a.clone(),
            y,
        });
    }
    let dims = effective_dims(&prior.cov)?;
    let fp = FilterProblem::new(steps, gamma, prior.mean, prior.cov)?;
    Ok(FilterSetup {
        reference: kalman_filter(&fp)?,
        fp,
        dims,
    })
}
