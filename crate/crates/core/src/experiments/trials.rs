//! Single-trial runners for every experiment family.

use rand::Rng as _;

use super::setup::{CovSetup, EkiSetup, Family, FilterSetup, LinearSetup};
use super::{
    preset, run_experiment_detailed, trial_seed, ExperimentKind, ExperimentRun,
    ExperimentSpec, TrialRecord,
};
use crate::eki::{eki_update_with_perturbations, leki_update_with_perturbations, EkiProblem};
use crate::error::{Error, Result};
use crate::estimators::{
    cov_of_columns, cross_cov_of_columns, effective_dims, mean_of_columns, positive_part,
    row_lq_norm, theorem_radius_cov, theorem_radius_cross, threshold, LocalizationConfig,
};
use crate::filter::sr_enkf;
use crate::matrix::{max_norm, operator_norm, symmetrize, Matrix, Vector};
use crate::models::{make_covariance, standard_normal_matrix, CovarianceSpec, Ensemble, LinearMap};
use crate::operators::{cov_update, mean_update, LinearProblem};
use crate::oracle::{exact_posterior, po_covariance_expansion};
use crate::rng::{derive_seed, rng_from_seed, stream, Rng};
use crate::updates::{
    eakf_update, etkf_update, localized_po_update, localized_sr_update, offset, po_update,
    po_update_with_perturbations, UpdateResult,
};

struct Ctx<'a> {
    spec: &'a ExperimentSpec,
    n: usize,
    index: u64,
    seed: u64,
}

impl Ctx<'_> {
    fn record(&self, method: &str, error_mean: f64, error_cov: f64) -> TrialRecord {
        TrialRecord {
            experiment: self.spec.id.clone(),
            n: self.n,
            seed: self.index,
            method: method.to_string(),
            error_mean,
            error_cov,
            offset_norm: None,
            radius: None,
            r2: None,
            r_inf: None,
        }
    }

    fn rng(&self, tag: u64) -> Rng {
        rng_from_seed(derive_seed(self.seed, tag))
    }
}

pub(super) fn run_trial(
    spec: &ExperimentSpec,
    family: &Family,
    methods: &[String],
    setup: usize,
    n: usize,
    index: u64,
) -> Result<Vec<TrialRecord>> {
    let ctx = Ctx {
        spec,
        n,
        index,
        seed: trial_seed(spec, index),
    };
    let recs = match family {
        Family::Linear(setups) => linear(&ctx, &setups[setup], methods),
        Family::Covariance(s) => covariance(&ctx, s, methods),
        Family::Eki(s) => eki(&ctx, s, methods),
        Family::Filter(s) => filter(&ctx, s),
        Family::Checks { dmax, kmax } => checks(&ctx, *dmax, *kmax),
        Family::Sparsity => sparsity(&ctx),
    }?;
    for r in &recs {
        if !(r.error_mean >= 0.0 && r.error_mean.is_finite())
            || !(r.error_cov >= 0.0 && r.error_cov.is_finite())
        {
            return Err(Error::Numeric(format!(
                "non-finite error in trial N={n} seed={index} method={}",
                r.method
            )));
        }
    }
    Ok(recs)
}

fn localization(spec: &ExperimentSpec) -> LocalizationConfig {
    match spec.calibration.radius {
        Some(radius) => LocalizationConfig::Explicit { radius },
        None => LocalizationConfig::Derived {
            t: spec.calibration.t,
            c: spec.calibration.c,
        },
    }
}

fn linear(ctx: &Ctx, s: &LinearSetup, methods: &[String]) -> Result<Vec<TrialRecord>> {
    let e = Ensemble::new(s.sampler.sample(ctx.n, &mut ctx.rng(stream::PRIOR)))?;
    let pert = derive_seed(ctx.seed, stream::PERTURBATION);
    let loc = localization(ctx.spec);
    let mut out = Vec::with_capacity(methods.len());
    for m in methods {
        let res: UpdateResult = match m.as_str() {
            "po" => po_update(&e, &s.problem, pert)?,
            "sr" | "eakf" => eakf_update(&e, &s.problem)?,
            "etkf" => etkf_update(&e, &s.problem, None)?,
            "loc_po" => localized_po_update(&e, &s.problem, &loc, pert)?,
            "loc_sr" => localized_sr_update(&e, &s.problem, &loc)?,
            other => return Err(Error::invalid(format!("unknown method '{other}'"))),
        };
        let mut r = ctx.record(
            m,
            (&res.mu_hat - &s.post_mean).norm(),
            operator_norm(&(&res.sigma_hat - &s.post_cov))?,
        );
        r.offset_norm = res.diagnostics.offset_norm;
        r.radius = res.diagnostics.radius_used;
        r.r2 = Some(s.r2_label.unwrap_or(s.dims.r2));
        r.r_inf = Some(s.dims.r_inf);
        out.push(r);
    }
    Ok(out)
}

fn covariance(ctx: &Ctx, s: &CovSetup, methods: &[String]) -> Result<Vec<TrialRecord>> {
    let u = s.sampler.sample(ctx.n, &mut ctx.rng(stream::PRIOR));
    let c_hat = cov_of_columns(&u)?;
    let mean_err = (mean_of_columns(&u) - &s.mean).norm();
    let cal = ctx.spec.calibration;
    let radius_with = |c: f64| -> Result<f64> {
        match cal.radius {
            Some(r) => Ok(r),
            None => theorem_radius_cov(s.dims.max_diag, s.dims.r_inf, ctx.n, cal.t, c),
        }
    };
    let mut rho = radius_with(cal.c)?;
    if ctx.spec.kind == ExperimentKind::PositivePart {
        // spread the instances over a range of radii
        rho *= ctx.rng(stream::PARTICLE).random_range(0.25..2.0);
    }
    let err = |b: &Matrix| operator_norm(&(b - &s.cov));
    let tag = |mut r: TrialRecord, radius: Option<f64>| {
        r.radius = radius;
        r.r2 = Some(s.dims.r2);
        r.r_inf = Some(s.dims.r_inf);
        r
    };
    let mut out = Vec::new();
    for m in methods {
        let (value, radius) = match m.as_str() {
            "sample" => (err(&c_hat)?, None),
            "thresholded" => (err(&threshold(&c_hat, rho)?)?, Some(rho)),
            "positive_part" => (err(&positive_part(&threshold(&c_hat, rho)?)?)?, Some(rho)),
            other => return Err(Error::invalid(format!("unknown method '{other}'"))),
        };
        out.push(tag(ctx.record(m, mean_err, value), radius));
    }
    if ctx.spec.kind == ExperimentKind::RadiusSweep {
        for &c in &ctx.spec.options.c_grid {
            let r = radius_with(c)?;
            let value = err(&threshold(&c_hat, r)?)?;
            out.push(tag(ctx.record(&format!("thresholded_c{c}"), mean_err, value), Some(r)));
        }
    }
    Ok(out)
}

fn eki(ctx: &Ctx, s: &EkiSetup, methods: &[String]) -> Result<Vec<TrialRecord>> {
    let mut u = s.sampler.sample(ctx.n, &mut ctx.rng(stream::PRIOR));
    u.set_column(0, &s.u_fixed);
    let mut eta = s.noise.sample(ctx.n, &mut ctx.rng(stream::PERTURBATION));
    eta.set_column(0, &s.eta_fixed);
    let e = Ensemble::new(u)?;
    let cal = ctx.spec.calibration;
    let mut out = Vec::with_capacity(methods.len());
    for m in methods {
        let (res, radius) = match m.as_str() {
            "eki" => (eki_update_with_perturbations(&e, &s.prob, &eta)?, None),
            "leki" => {
                let (rho_up, rho_pp) = match cal.radius {
                    Some(r) => (r, r),
                    None => (
                        theorem_radius_cross(
                            s.dims_c.max_diag,
                            s.dims_pp.max_diag,
                            s.dims_c.r_inf,
                            s.dims_pp.r_inf,
                            ctx.n,
                            cal.t,
                            cal.c_cross,
                        )?,
                        theorem_radius_cov(s.dims_pp.max_diag, s.dims_pp.r_inf, ctx.n, cal.t, cal.c)?,
                    ),
                };
                (
                    leki_update_with_perturbations(&e, &s.prob, rho_up, rho_pp, &eta)?,
                    Some(rho_up),
                )
            }
            other => return Err(Error::invalid(format!("unknown method '{other}'"))),
        };
        let moved = res.ensemble.member(0);
        let mut r = ctx.record(
            m,
            (moved - &s.target).norm(),
            operator_norm(&(&res.diagnostics.gain - &s.gain))?,
        );
        r.radius = radius;
        r.r2 = Some(s.dims_c.r2);
        r.r_inf = Some(s.dims_c.r_inf);
        out.push(r);
    }
    Ok(out)
}

fn filter(ctx: &Ctx, s: &FilterSetup) -> Result<Vec<TrialRecord>> {
    let trace = sr_enkf(&s.fp, ctx.n, ctx.seed)?;
    let (got, want) = (trace.last(), s.reference.last());
    let mut r = ctx.record(
        "sr_enkf",
        (&got.analysis_mean - &want.analysis_mean).norm(),
        operator_norm(&(&got.analysis_cov - &want.analysis_cov))?,
    );
    r.r2 = Some(s.dims.r2);
    r.r_inf = Some(s.dims.r_inf);
    Ok(vec![r])
}

/// Largest absolute entry of `a - b`, relative to `max(1, |b|_max)`.
fn rel_diff(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dims("compared matrices differ in shape"));
    }
    Ok(max_norm(&(a - b))? / max_norm(b)?.max(1.0))
}

fn rel_diff_vec(a: &Vector, b: &Vector) -> Result<f64> {
    rel_diff(
        &Matrix::from_column_slice(a.len(), 1, a.as_slice()),
        &Matrix::from_column_slice(b.len(), 1, b.as_slice()),
    )
}

struct Instance {
    m: Vector,
    c: Matrix,
    problem: LinearProblem,
}

/// Random instance with a possibly rank-deficient prior covariance and a
/// well-conditioned noise covariance.
fn random_instance(rng: &mut Rng, dmax: usize, kmax: usize) -> Result<Instance> {
    let d = rng.random_range(1..=dmax);
    let k = rng.random_range(1..=kmax);
    let rank = rng.random_range(1..=d);
    let g = standard_normal_matrix(d, rank, rng);
    let c = symmetrize(&g * g.transpose() / rank as f64);
    let m = standard_normal_matrix(d, 1, rng).column(0).into_owned();
    let a = Matrix::from_fn(k, d, |_, _| rng.random_range(-1.0..1.0));
    let h = standard_normal_matrix(k, k, rng);
    let gamma = symmetrize(&h * h.transpose() / k as f64 + Matrix::identity(k, k) * 0.2);
    let y = standard_normal_matrix(k, 1, rng).column(0).into_owned() * 2.0;
    Ok(Instance {
        m,
        c,
        problem: LinearProblem::new(a, gamma, y)?,
    })
}

fn sample_members(inst: &Instance, n: usize, rng: &mut Rng) -> Result<Ensemble> {
    let z = standard_normal_matrix(inst.c.ncols(), n, rng);
    let factor = crate::matrix::sqrt_factor(&inst.c)?;
    let mut u = factor * z;
    for mut col in u.column_iter_mut() {
        col += &inst.m;
    }
    Ensemble::new(u)
}

fn checks(ctx: &Ctx, dmax: usize, kmax: usize) -> Result<Vec<TrialRecord>> {
    let mut rng = ctx.rng(stream::PROBLEM);
    let inst = random_instance(&mut rng, dmax, kmax)?;
    let p = &inst.problem;
    match ctx.spec.kind {
        ExperimentKind::Exactness => {
            let (mu, sigma) = exact_posterior(&inst.m, &inst.c, p)?;
            let mu_op = mean_update(&inst.m, &inst.c, p)?;
            let sigma_op = cov_update(&inst.c, &p.a, &p.gamma)?;
            Ok(vec![ctx.record(
                "operators_vs_oracle",
                rel_diff_vec(&mu_op, &mu)?,
                rel_diff(&sigma_op, &sigma)?,
            )])
        }
        ExperimentKind::SrConsistency => {
            let e = sample_members(&inst, ctx.n, &mut ctx.rng(stream::PRIOR))?;
            let c_hat = cov_of_columns(e.members())?;
            let m_hat = mean_of_columns(e.members());
            let mu = mean_update(&m_hat, &c_hat, p)?;
            let sigma = cov_update(&c_hat, &p.a, &p.gamma)?;
            let t = etkf_update(&e, p, None)?;
            let a = eakf_update(&e, p)?;
            Ok(vec![
                ctx.record("etkf", rel_diff_vec(&t.mu_hat, &mu)?, rel_diff(&t.sigma_hat, &sigma)?),
                ctx.record("eakf", rel_diff_vec(&a.mu_hat, &mu)?, rel_diff(&a.sigma_hat, &sigma)?),
                ctx.record(
                    "etkf_vs_eakf",
                    rel_diff_vec(&t.mu_hat, &a.mu_hat)?,
                    rel_diff(&t.sigma_hat, &a.sigma_hat)?,
                ),
            ])
        }
        ExperimentKind::PoIdentity => {
            let e = sample_members(&inst, ctx.n, &mut ctx.rng(stream::PRIOR))?;
            let eta = standard_normal_matrix(p.obs_dim(), ctx.n, &mut ctx.rng(stream::PERTURBATION));
            let eta = crate::matrix::cholesky_pd(&p.gamma)? * eta;
            let u = e.members();
            let c_hat = cov_of_columns(u)?;
            let off = offset(&c_hat, &cov_of_columns(&eta)?, &cross_cov_of_columns(u, &eta)?, p)?;
            let target = cov_update(&c_hat, &p.a, &p.gamma)? + &off;
            let k = p.gain(&c_hat)?;
            let mean_target =
                mean_update(&mean_of_columns(u), &c_hat, p)? - k * mean_of_columns(&eta);
            let res = po_update_with_perturbations(&e, p, &eta)?;
            let updated_cov = cov_of_columns(res.ensemble.members())?;
            let expansion = po_covariance_expansion(&e, &eta, p)?;
            let mut po = ctx.record(
                "po",
                rel_diff_vec(&res.mu_hat, &mean_target)?,
                rel_diff(&updated_cov, &target)?,
            );
            po.offset_norm = res.diagnostics.offset_norm;
            let mut ex = ctx.record("po_expansion", 0.0, rel_diff(&expansion, &target)?);
            ex.offset_norm = Some(operator_norm(&off)?);
            Ok(vec![po, ex])
        }
        ExperimentKind::EkiPoEquivalence => {
            let e = sample_members(&inst, ctx.n, &mut ctx.rng(stream::PRIOR))?;
            let eta = standard_normal_matrix(p.obs_dim(), ctx.n, &mut ctx.rng(stream::PERTURBATION));
            let eta = crate::matrix::cholesky_pd(&p.gamma)? * eta;
            let prob = EkiProblem::new(
                std::sync::Arc::new(LinearMap::new(p.a.clone())?),
                p.gamma.clone(),
                p.y.clone(),
            )?;
            let via_eki = eki_update_with_perturbations(&e, &prob, &eta)?;
            let via_po = po_update_with_perturbations(&e, p, &eta)?;
            Ok(vec![ctx.record(
                "eki_vs_po",
                rel_diff(via_eki.ensemble.members(), via_po.ensemble.members())?,
                rel_diff(&via_eki.sigma_hat, &via_po.sigma_hat)?,
            )])
        }
        other => Err(Error::invalid(format!("{other:?} is not a check experiment"))),
    }
}

/// `row_lq(ACAᵀ)` against `R_A² R_C ‖A‖_max^{2(1−q)} ‖C‖_max^{1−q}` with
/// `R_A = max(row_lq(A), row_lq(Aᵀ))`, for banded `A` and AR(1) `C`.
fn sparsity(ctx: &Ctx) -> Result<Vec<TrialRecord>> {
    let d = ctx.n;
    let q = ctx.spec.options.q;
    let mut rng = ctx.rng(stream::PROBLEM);
    let bandwidth = rng.random_range(1..=3usize);
    let phi = rng.random_range(0.2..0.8);
    let a = Matrix::from_fn(d, d, |i, j| {
        let gap = i.abs_diff(j);
        if gap == 0 {
            1.0
        } else if gap <= bandwidth {
            rng.random_range(-1.0..1.0)
        } else {
            0.0
        }
    });
    let c = make_covariance(&CovarianceSpec::Ar1 {
        dim: d,
        phi,
        variance: 1.0,
    })?;
    let lhs = row_lq_norm(&symmetrize(&a * &c * a.transpose()), q)?;
    let r_a = row_lq_norm(&a, q)?.max(row_lq_norm(&a.transpose(), q)?);
    let rhs = r_a * r_a
        * row_lq_norm(&c, q)?
        * max_norm(&a)?.powf(2.0 * (1.0 - q))
        * max_norm(&c)?.powf(1.0 - q);
    let dims = effective_dims(&c)?;
    let mut r = ctx.record("row_lq_product", lhs, rhs);
    r.r2 = Some(dims.r2);
    r.r_inf = Some(dims.r_inf);
    Ok(vec![r])
}

/// Runs the inner preset twice under the outer master seed.
pub(super) fn determinism(spec: &ExperimentSpec) -> Result<ExperimentRun> {
    let name = spec
        .options
        .inner
        .as_deref()
        .ok_or_else(|| Error::invalid("options.inner: missing"))?;
    let mut inner = preset(name)?;
    inner.master_seed = spec.master_seed;
    let first = run_experiment_detailed(&inner)?;
    let second = run_experiment_detailed(&inner)?;
    let tag = |run: &ExperimentRun, label: &str| -> Vec<TrialRecord> {
        run.records
            .iter()
            .map(|r| TrialRecord {
                experiment: spec.id.clone(),
                method: format!("{label}:{}", r.method),
                ..r.clone()
            })
            .collect()
    };
    let mut records = tag(&first, "run1");
    records.extend(tag(&second, "run2"));
    Ok(ExperimentRun {
        records,
        trials: first.trials + second.trials,
        failed: first.failed + second.failed,
    })
}
