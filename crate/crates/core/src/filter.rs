//! Multi-step linear-Gaussian filtering: the Kalman filter and the square
//! root ensemble Kalman filter.

use crate::error::{Error, Result};
use crate::estimators::{cov_of_columns, mean_of_columns};
use crate::matrix::{ensure_finite, ensure_square, symmetrize, Matrix, Vector};
use crate::models::{sample_ensemble, Ensemble, GaussianPrior};
use crate::operators::{cov_update_with_gain, LinearProblem};
use crate::rng::{derive_seed, stream};
use crate::updates::eakf_update;

/// One assimilation cycle: dynamics `M`, observation operator `A` and data `y`.
#[derive(Debug, Clone)]
pub struct FilterStep {
    pub dynamics: Matrix,
    pub obs: Matrix,
    pub y: Vector,
}

#[derive(Debug, Clone)]
pub struct FilterProblem {
    pub steps: Vec<FilterStep>,
    pub gamma: Matrix,
    pub init_mean: Vector,
    pub init_cov: Matrix,
}

impl FilterProblem {
    pub fn new(
        steps: Vec<FilterStep>,
        gamma: Matrix,
        init_mean: Vector,
        init_cov: Matrix,
    ) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::invalid("a filter problem needs at least one step"));
        }
        // validates the initial moments
        GaussianPrior::new(init_mean.clone(), init_cov.clone())?;
        let d = init_mean.len();
        for (t, s) in steps.iter().enumerate() {
            ensure_square(&s.dynamics, "dynamics")?;
            ensure_finite(&s.dynamics, "dynamics")?;
            if s.dynamics.nrows() != d || s.obs.ncols() != d {
                return Err(Error::dims(format!(
                    "step {}: dynamics must be {d}x{d} and the observation operator must have {d} columns",
                    t + 1
                )));
            }
            // checks Gamma and the data dimensions
            LinearProblem::new(s.obs.clone(), gamma.clone(), s.y.clone())?;
        }
        Ok(Self {
            steps,
            gamma,
            init_mean,
            init_cov,
        })
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn state_dim(&self) -> usize {
        self.init_mean.len()
    }

    fn problem_at(&self, t: usize) -> Result<LinearProblem> {
        let s = &self.steps[t];
        LinearProblem::new(s.obs.clone(), self.gamma.clone(), s.y.clone())
    }
}

/// Forecast and analysis moments of one cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMoments {
    pub forecast_mean: Vector,
    pub forecast_cov: Matrix,
    pub analysis_mean: Vector,
    pub analysis_cov: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterTrace {
    pub steps: Vec<StepMoments>,
    /// Per-step back-out mean drift; empty for the exact filter.
    pub mean_drift: Vec<f64>,
}

impl FilterTrace {
    pub fn last(&self) -> &StepMoments {
        self.steps.last().expect("traces have at least one step")
    }
}

/// Exact recursion: `m = Mμ`, `C = MΣMᵀ`, `μ = ℳ(m, C)`, `Σ = 𝒞(C)`.
pub fn kalman_filter(fp: &FilterProblem) -> Result<FilterTrace> {
    let mut mu = fp.init_mean.clone();
    let mut sigma = fp.init_cov.clone();
    let mut steps = Vec::with_capacity(fp.horizon());
    for (t, s) in fp.steps.iter().enumerate() {
        let m = &s.dynamics * &mu;
        let c = symmetrize(&s.dynamics * &sigma * s.dynamics.transpose());
        let problem = fp.problem_at(t)?;
        let k = problem.gain(&c)?;
        mu = &m + &k * (&s.y - &s.obs * &m);
        sigma = cov_update_with_gain(&c, &s.obs, &k);
        steps.push(StepMoments {
            forecast_mean: m,
            forecast_cov: c,
            analysis_mean: mu.clone(),
            analysis_cov: sigma.clone(),
        });
    }
    Ok(FilterTrace {
        steps,
        mean_drift: Vec::new(),
    })
}

/// Square root EnKF: propagate every member, then apply the square-root
/// analysis and back out the members.
///
/// The analysis uses the symmetric state-space adjustment, which maps the
/// prior anomalies to analysis anomalies with zero mean, so the backed-out
/// ensemble carries `ℳ(m̂, Ĉ)` into the next cycle exactly.
pub fn sr_enkf(fp: &FilterProblem, n: usize, seed: u64) -> Result<FilterTrace> {
    if n < 2 {
        return Err(Error::invalid("the ensemble needs at least 2 members"));
    }
    let prior = GaussianPrior::new(fp.init_mean.clone(), fp.init_cov.clone())?;
    let mut ensemble = sample_ensemble(&prior, n, derive_seed(seed, stream::PRIOR))?;
    let mut steps = Vec::with_capacity(fp.horizon());
    let mut drift = Vec::with_capacity(fp.horizon());
    for (t, s) in fp.steps.iter().enumerate() {
        let forecast = Ensemble::new(&s.dynamics * ensemble.members())?;
        let problem = fp.problem_at(t)?;
        let r = eakf_update(&forecast, &problem)?;
        steps.push(StepMoments {
            forecast_mean: mean_of_columns(forecast.members()),
            forecast_cov: cov_of_columns(forecast.members())?,
            analysis_mean: r.mu_hat,
            analysis_cov: r.sigma_hat,
        });
        drift.push(r.diagnostics.mean_drift.unwrap_or(0.0));
        ensemble = r.ensemble;
    }
    Ok(FilterTrace {
        steps,
        mean_drift: drift,
    })
}
