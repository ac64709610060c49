//! Monte Carlo harness: seeded trials over an `N` grid, CSV records, rate
//! fits, paired win rates and bound overlays.
//!
//! Trial `i` of experiment `id` draws everything from
//! `mix(master_seed, id, i)`; the `seed` column of a record holds `i`. The
//! problem instance (truth, data, population moments) is fixed per
//! experiment and derived from the master seed alone.

mod criteria;
mod presets;
mod setup;
mod stats;
mod trials;

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{CovarianceSpec, Ensemble};
use crate::rng::mix;

pub use criteria::{
    criteria, evaluate, evaluate_records, summarize, Criterion, CriterionOutcome, ExperimentSummary,
    MedianRow, MethodSummary, WinRate,
};
pub use presets::{preset, preset_names, ACCEPTANCE_PRESETS};
pub use stats::{
    calibrate_bound, compare_win_rate, fit_medians, fit_rate, median, medians_by_n,
    theorem_bound_curve, BoundConstants, BoundKind, Metric, RateFit,
};

/// Experiment families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Operators against the explicit-inverse posterior on random instances.
    Exactness,
    /// ETKF/EAKF analysis covariance against `𝒞(Ĉ)`.
    SrConsistency,
    /// PO sample covariance against `𝒞(Ĉ) + Ô` with injected perturbations.
    PoIdentity,
    MeanRate,
    CovRate,
    /// Same trials as the rate kinds; summarized against calibrated bound curves.
    BoundOverlay,
    PoVsSr,
    /// Mean error across the `r2_grid` option at fixed `N`.
    EffectiveDim,
    LocVsSample,
    PositivePart,
    RadiusSweep,
    EkiPoEquivalence,
    EkiMeanfield,
    LekiVsEki,
    MultistepRate,
    /// Row-ℓq product inequality; the `N` grid holds the dimensions.
    SparsityPropagation,
    /// Runs the `inner` preset twice and tags the records `run1:`/`run2:`.
    Determinism,
}

impl ExperimentKind {
    fn uses_medians(self) -> bool {
        matches!(
            self,
            ExperimentKind::MeanRate
                | ExperimentKind::CovRate
                | ExperimentKind::BoundOverlay
                | ExperimentKind::PoVsSr
                | ExperimentKind::EffectiveDim
                | ExperimentKind::EkiMeanfield
                | ExperimentKind::MultistepRate
        )
    }

    /// Methods run when a spec lists none.
    fn default_methods(self) -> &'static [&'static str] {
        match self {
            ExperimentKind::Exactness => &["operators_vs_oracle"],
            ExperimentKind::SrConsistency => &["etkf", "eakf", "etkf_vs_eakf"],
            ExperimentKind::PoIdentity => &["po", "po_expansion"],
            ExperimentKind::MeanRate
            | ExperimentKind::CovRate
            | ExperimentKind::BoundOverlay
            | ExperimentKind::EffectiveDim => &["sr"],
            ExperimentKind::PoVsSr => &["po", "sr"],
            ExperimentKind::LocVsSample => &["sample", "thresholded"],
            ExperimentKind::PositivePart => &["thresholded", "positive_part"],
            ExperimentKind::RadiusSweep => &["sample"],
            ExperimentKind::EkiPoEquivalence => &["eki_vs_po"],
            ExperimentKind::EkiMeanfield => &["eki"],
            ExperimentKind::LekiVsEki => &["eki", "leki"],
            ExperimentKind::MultistepRate => &["sr_enkf"],
            ExperimentKind::SparsityPropagation => &["row_lq_product"],
            ExperimentKind::Determinism => &[],
        }
    }

    fn allowed_methods(self) -> &'static [&'static str] {
        match self {
            ExperimentKind::MeanRate
            | ExperimentKind::CovRate
            | ExperimentKind::BoundOverlay
            | ExperimentKind::PoVsSr
            | ExperimentKind::EffectiveDim => &["po", "sr", "etkf", "eakf", "loc_po", "loc_sr"],
            ExperimentKind::LocVsSample | ExperimentKind::PositivePart => {
                &["sample", "thresholded", "positive_part"]
            }
            ExperimentKind::RadiusSweep => &["sample"],
            ExperimentKind::EkiMeanfield | ExperimentKind::LekiVsEki => &["eki", "leki"],
            _ => self.default_methods(),
        }
    }
}

/// Forward operator of a generated problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ForwardSpec {
    /// `A = I`, `k = d`.
    Identity,
    /// `A_ij ~ N(0, 1/d)`, drawn from the problem seed.
    Gaussian { k: usize },
    /// `A_ii = 1` and `A_ij ~ U(−0.5, 0.5)` for `0 < |i−j| <= bandwidth`.
    Banded { k: usize, bandwidth: usize },
    /// `G_j(u) = tanh(u_j) + 0.1 u_{j+1}`.
    Tanh { k: usize },
    Matrix { matrix: Vec<Vec<f64>> },
}

impl ForwardSpec {
    pub fn obs_dim(&self, d: usize) -> usize {
        match self {
            ForwardSpec::Identity => d,
            ForwardSpec::Gaussian { k } | ForwardSpec::Banded { k, .. } | ForwardSpec::Tanh { k } => {
                *k
            }
            ForwardSpec::Matrix { matrix } => matrix.len(),
        }
    }
}

/// Generated problem: prior covariance, forward operator and noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub covariance: CovarianceSpec,
    #[serde(default)]
    pub prior_mean: Option<Vec<f64>>,
    #[serde(default = "default_forward")]
    pub forward: ForwardSpec,
    /// Observation noise covariance; identity when omitted.
    #[serde(default)]
    pub noise: Option<CovarianceSpec>,
}

fn default_forward() -> ForwardSpec {
    ForwardSpec::Identity
}

/// Radius calibration: `(t, c)` for covariance radii, `c_cross` for
/// cross-covariance radii, or a fixed radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    #[serde(default = "one")]
    pub t: f64,
    #[serde(default = "one")]
    pub c: f64,
    #[serde(default = "one")]
    pub c_cross: f64,
    #[serde(default)]
    pub radius: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl Default for Calibration {
    fn default() -> Self {
        Self {
            t: 1.0,
            c: 1.0,
            c_cross: 1.0,
            radius: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentOptions {
    /// Geometric-spectrum priors with these `r₂` values replace the covariance.
    #[serde(default)]
    pub r2_grid: Vec<f64>,
    /// Multipliers of the rate-derived radius for `radius_sweep`.
    #[serde(default)]
    pub c_grid: Vec<f64>,
    /// Monte Carlo size of the mean-field reference.
    #[serde(default = "default_n_ref")]
    pub n_ref: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    /// Dynamics `M = scale * orthogonal` for filtering.
    #[serde(default = "default_dynamics_scale")]
    pub dynamics_scale: f64,
    /// Quasi-norm exponent for the sparsity checks.
    #[serde(default = "default_q")]
    pub q: f64,
    /// Preset rerun by `determinism`.
    #[serde(default)]
    pub inner: Option<String>,
}

fn default_n_ref() -> usize {
    1_000_000
}
fn default_horizon() -> usize {
    5
}
fn default_dynamics_scale() -> f64 {
    0.9
}
fn default_q() -> f64 {
    0.5
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            r2_grid: Vec::new(),
            c_grid: Vec::new(),
            n_ref: default_n_ref(),
            horizon: default_horizon(),
            dynamics_scale: default_dynamics_scale(),
            q: default_q(),
            inner: None,
        }
    }
}

/// A complete, serializable experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub id: String,
    pub kind: ExperimentKind,
    #[serde(default)]
    pub master_seed: u64,
    pub seeds: usize,
    pub n_grid: Vec<usize>,
    pub problem: ProblemSpec,
    #[serde(default)]
    pub methods: Vec<String>,
    #[serde(default)]
    pub calibration: Calibration,
    #[serde(default)]
    pub options: ExperimentOptions,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::invalid("id: must be non-empty"));
        }
        if self.seeds == 0 {
            return Err(Error::invalid("seeds: must be >= 1"));
        }
        if self.kind.uses_medians() && self.seeds < 30 {
            return Err(Error::invalid(format!(
                "seeds: median-based experiments need >= 30 seeds, got {}",
                self.seeds
            )));
        }
        if self.n_grid.is_empty() {
            return Err(Error::invalid("n_grid: must be non-empty"));
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("n_grid: must be strictly increasing"));
        }
        if self.kind != ExperimentKind::SparsityPropagation && self.n_grid[0] < 2 {
            return Err(Error::invalid("n_grid: ensemble sizes must be >= 2"));
        }
        if self.kind == ExperimentKind::Determinism {
            let inner = self
                .options
                .inner
                .as_deref()
                .ok_or_else(|| Error::invalid("options.inner: determinism needs a preset name"))?;
            if preset(inner)?.kind == ExperimentKind::Determinism {
                return Err(Error::invalid("options.inner: cannot nest determinism presets"));
            }
        }
        let allowed = self.kind.allowed_methods();
        for m in &self.methods {
            if !allowed.contains(&m.as_str()) {
                return Err(Error::invalid(format!(
                    "methods: '{m}' is not available for {:?} (expected one of {allowed:?})",
                    self.kind
                )));
            }
        }
        let cal = &self.calibration;
        if !(cal.t >= 1.0) || !(cal.c > 0.0) || !(cal.c_cross > 0.0) {
            return Err(Error::invalid("calibration: need t >= 1, c > 0, c_cross > 0"));
        }
        if let Some(r) = cal.radius {
            if !(r >= 0.0) || !r.is_finite() {
                return Err(Error::invalid("calibration.radius: must be finite and >= 0"));
            }
        }
        if self.options.r2_grid.iter().any(|r| !(*r >= 1.0)) {
            return Err(Error::invalid("options.r2_grid: values must be >= 1"));
        }
        if self.kind == ExperimentKind::RadiusSweep && self.options.c_grid.is_empty() {
            return Err(Error::invalid("options.c_grid: radius_sweep needs at least one value"));
        }
        if self.options.c_grid.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::invalid("options.c_grid: values must be > 0"));
        }
        if !(0.0..1.0).contains(&self.options.q) {
            return Err(Error::invalid("options.q: must lie in [0, 1)"));
        }
        if self.options.horizon == 0 {
            return Err(Error::invalid("options.horizon: must be >= 1"));
        }
        if self.options.n_ref < 2 {
            return Err(Error::invalid("options.n_ref: must be >= 2"));
        }
        Ok(())
    }

    /// Methods to run, in output order.
    pub fn effective_methods(&self) -> Vec<String> {
        if self.methods.is_empty() {
            self.kind
                .default_methods()
                .iter()
                .map(|s| s.to_string())
                .collect()
        } else {
            self.methods.clone()
        }
    }
}

/// One row of the records CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub experiment: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub seed: u64,
    pub method: String,
    pub error_mean: f64,
    pub error_cov: f64,
    pub offset_norm: Option<f64>,
    pub radius: Option<f64>,
    pub r2: Option<f64>,
    pub r_inf: Option<f64>,
}

/// Column order of the records CSV.
pub const CSV_HEADER: [&str; 10] = [
    "experiment",
    "N",
    "seed",
    "method",
    "error_mean",
    "error_cov",
    "offset_norm",
    "radius",
    "r2",
    "r_inf",
];

/// Records of a run plus the number of trials that errored.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRun {
    pub records: Vec<TrialRecord>,
    pub trials: usize,
    pub failed: usize,
}

/// Seed of trial `i`: `mix(master_seed, id, i)`.
pub fn trial_seed(spec: &ExperimentSpec, i: u64) -> u64 {
    mix(spec.master_seed, &spec.id, i)
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<TrialRecord>> {
    Ok(run_experiment_detailed(spec)?.records)
}

/// Runs every `(setup, N, seed)` trial in parallel, then sorts the records
/// canonically. Fails if more than 10% of the trials error.
pub fn run_experiment_detailed(spec: &ExperimentSpec) -> Result<ExperimentRun> {
    spec.validate()?;
    if spec.kind == ExperimentKind::Determinism {
        return trials::determinism(spec);
    }
    let family = setup::build(spec)?;
    let setups = family.setup_count();
    let mut jobs = Vec::with_capacity(setups * spec.n_grid.len() * spec.seeds);
    for s in 0..setups {
        for &n in &spec.n_grid {
            for i in 0..spec.seeds as u64 {
                jobs.push((s, n, i));
            }
        }
    }
    let methods = spec.effective_methods();
    let outcomes: Vec<Result<Vec<TrialRecord>>> = jobs
        .par_iter()
        .map(|&(s, n, i)| trials::run_trial(spec, &family, &methods, s, n, i))
        .collect();
    let trials = outcomes.len();
    let mut failed = 0;
    let mut first_error = None;
    let mut records = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => records.extend(r),
            Err(e) => {
                failed += 1;
                first_error.get_or_insert(e);
            }
        }
    }
    if failed * 10 > trials {
        return Err(Error::Numeric(format!(
            "{failed} of {trials} trials failed; first error: {}",
            first_error.expect("failures recorded")
        )));
    }
    sort_records(&mut records);
    Ok(ExperimentRun {
        records,
        trials,
        failed,
    })
}

/// Canonical order: `r2`, `N`, seed, method.
pub fn sort_records(records: &mut [TrialRecord]) {
    records.sort_by(|a, b| {
        a.r2.unwrap_or(f64::NEG_INFINITY)
            .total_cmp(&b.r2.unwrap_or(f64::NEG_INFINITY))
            .then(a.n.cmp(&b.n))
            .then(a.seed.cmp(&b.seed))
            .then(a.method.cmp(&b.method))
            .then(a.experiment.cmp(&b.experiment))
    });
}

pub fn write_csv<W: Write>(records: &[TrialRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER)
        .map_err(|e| Error::invalid(format!("csv: {e}")))?;
    for r in records {
        w.serialize(r)
            .map_err(|e| Error::invalid(format!("csv: {e}")))?;
    }
    w.flush()
        .map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(())
}

pub fn records_to_csv(records: &[TrialRecord]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_csv(records, &mut buf)?;
    Ok(buf)
}

/// Parses a records CSV; the header must match [`CSV_HEADER`].
pub fn read_csv<R: Read>(input: R) -> Result<Vec<TrialRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r
        .headers()
        .map_err(|e| Error::invalid(format!("csv header: {e}")))?
        .clone();
    if header.is_empty() {
        return Ok(Vec::new());
    }
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::invalid(format!(
            "csv header must be {}, got {}",
            CSV_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, row) in r.deserialize().enumerate() {
        let rec: TrialRecord =
            row.map_err(|e| Error::invalid(format!("csv row {}: {e}", i + 2)))?;
        if !(rec.error_mean >= 0.0 && rec.error_mean.is_finite())
            || !(rec.error_cov >= 0.0 && rec.error_cov.is_finite())
        {
            return Err(Error::invalid(format!(
                "csv row {}: errors must be finite and >= 0",
                i + 2
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Plain EKI iteration: `steps` successive updates, each with fresh
/// perturbations; returns every iterate including the initial ensemble.
pub fn eki_iterate(
    initial: &Ensemble,
    prob: &crate::eki::EkiProblem,
    steps: usize,
    seed: u64,
) -> Result<Vec<Ensemble>> {
    let mut out = vec![initial.clone()];
    for s in 0..steps {
        let next = crate::eki::eki_update(
            out.last().expect("non-empty"),
            prob,
            crate::rng::derive_seed(seed, s as u64),
        )?;
        out.push(next.ensemble);
    }
    Ok(out)
}
