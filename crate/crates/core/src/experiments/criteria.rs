//! Pass/fail evaluation of preset records against the acceptance thresholds,
//! plus per-experiment summaries.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::stats::{
    calibrate_bound, compare_win_rate, fit_medians, median, medians_by_n, theorem_bound_curve,
    BoundKind, Metric, RateFit,
};
use super::{preset, records_to_csv, TrialRecord};
use crate::error::{Error, Result};
use crate::models::make_covariance;
use crate::matrix::Matrix;

/// One acceptance criterion and the preset that executes it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Criterion {
    pub id: usize,
    pub preset: &'static str,
    pub title: &'static str,
    /// Wall-clock limit for running the preset, in seconds.
    pub time_limit_secs: f64,
}

const CRITERIA: [Criterion; 16] = [
    Criterion { id: 1, preset: "exactness", title: "operators match the explicit posterior to 1e-9", time_limit_secs: 5.0 },
    Criterion { id: 2, preset: "sr_consistency", title: "ETKF/EAKF covariance equals the covariance update to 1e-8", time_limit_secs: 5.0 },
    Criterion { id: 3, preset: "po_identity", title: "PO sample covariance equals update plus offset to 1e-9", time_limit_secs: 5.0 },
    Criterion { id: 4, preset: "mean_rate_sr", title: "SR mean-error slope -0.5 +/- 0.15", time_limit_secs: 120.0 },
    Criterion { id: 5, preset: "cov_rate_sr", title: "SR covariance-error slope -0.5 +/- 0.15", time_limit_secs: 120.0 },
    Criterion { id: 6, preset: "po_vs_sr", title: "SR beats PO on mean error (median, win rate >= 0.6)", time_limit_secs: 60.0 },
    Criterion { id: 7, preset: "effective_dim", title: "mean error increases with r2", time_limit_secs: 60.0 },
    Criterion { id: 8, preset: "loc_vs_sample", title: "thresholded beats sample covariance in >= 90% of seeds", time_limit_secs: 120.0 },
    Criterion { id: 9, preset: "positive_part", title: "positive part loses at most a factor 2", time_limit_secs: 10.0 },
    Criterion { id: 10, preset: "eki_po_equivalence", title: "linear EKI equals PO member-wise to 1e-10", time_limit_secs: 5.0 },
    Criterion { id: 11, preset: "eki_meanfield", title: "EKI distance to mean field, slope -0.5 +/- 0.15", time_limit_secs: 180.0 },
    Criterion { id: 12, preset: "leki_vs_eki", title: "LEKI beats EKI in distance to mean field (win rate >= 0.75)", time_limit_secs: 180.0 },
    Criterion { id: 13, preset: "multistep_rate", title: "terminal filter mean-error slope -0.5 +/- 0.15", time_limit_secs: 120.0 },
    Criterion { id: 14, preset: "bound_overlay", title: "medians below calibrated bound curves", time_limit_secs: 10.0 },
    Criterion { id: 15, preset: "sparsity_propagation", title: "row-lq product inequality holds", time_limit_secs: 10.0 },
    Criterion { id: 16, preset: "determinism", title: "reruns reproduce records byte-identically", time_limit_secs: 60.0 },
];

pub fn criteria() -> &'static [Criterion] {
    &CRITERIA
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionOutcome {
    pub id: usize,
    pub preset: String,
    pub title: String,
    pub passed: bool,
    pub detail: String,
    pub metrics: BTreeMap<String, f64>,
}

fn select<'a>(records: &'a [TrialRecord], method: &str) -> Vec<&'a TrialRecord> {
    records.iter().filter(|r| r.method == method).collect()
}

fn distinct_seeds(records: &[TrialRecord]) -> usize {
    records
        .iter()
        .map(|r| (r.n, r.seed))
        .collect::<BTreeSet<_>>()
        .len()
}

struct Check {
    passed: bool,
    detail: String,
    metrics: BTreeMap<String, f64>,
}

impl Check {
    fn new(passed: bool, detail: String, metrics: &[(&str, f64)]) -> Self {
        Self {
            passed,
            detail,
            metrics: metrics.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }
}

fn tolerance_check(records: &[TrialRecord], expected: usize, tol: f64) -> Check {
    let worst = records
        .iter()
        .map(|r| r.error_mean.max(r.error_cov))
        .fold(0.0, f64::max);
    let count = distinct_seeds(records);
    Check::new(
        count == expected && worst <= tol,
        format!("{count} instances, worst deviation {worst:.3e} (tolerance {tol:.0e})"),
        &[("instances", count as f64), ("worst", worst)],
    )
}

fn slope_check(records: &[TrialRecord], method: &str, metric: Metric) -> Result<Check> {
    let sel = select(records, method);
    let fit = fit_medians(&sel, metric)?;
    let ok = fit.points >= 3 && (fit.slope + 0.5).abs() <= 0.15;
    Ok(Check::new(
        ok,
        format!(
            "slope {:.3} (95% CI {:.3}..{:.3}) over {} N values",
            fit.slope, fit.slope_ci.0, fit.slope_ci.1, fit.points
        ),
        &[("slope", fit.slope), ("points", fit.points as f64)],
    ))
}

fn win_check(records: &[TrialRecord], a: &str, b: &str, metric: Metric, threshold: f64) -> Result<Check> {
    let rate = compare_win_rate(&select(records, a), &select(records, b), metric)?;
    Ok(Check::new(
        rate >= threshold,
        format!("win rate of {a} over {b}: {rate:.3} (threshold {threshold})"),
        &[("win_rate", rate)],
    ))
}

fn noise_matrix(name: &str) -> Result<(Matrix, Matrix)> {
    let spec = preset(name)?;
    let c = make_covariance(&spec.problem.covariance)?;
    let d = c.nrows();
    let k = spec.problem.forward.obs_dim(d);
    let gamma = match &spec.problem.noise {
        Some(n) => make_covariance(n)?,
        None => Matrix::identity(k, k),
    };
    Ok((c, gamma))
}

fn overlay_check(records: &[TrialRecord], name: &str) -> Result<Check> {
    let (c, gamma) = noise_matrix(name)?;
    let sel = select(records, "sr");
    let mut passed = true;
    let mut parts = Vec::new();
    let mut metrics = Vec::new();
    for (label, metric, kind) in [("mean", Metric::Mean, BoundKind::Mean), ("cov", Metric::Cov, BoundKind::Cov)] {
        let med = medians_by_n(&sel, metric);
        if med.len() < 2 {
            return Err(Error::invalid("bound overlay needs at least two N values"));
        }
        let (n0, m0) = med[0];
        let consts = calibrate_bound(kind, 0.0, &c, &gamma, n0, m0)?;
        let grid: Vec<usize> = med.iter().map(|p| p.0).collect();
        let curve = theorem_bound_curve(kind, consts, &c, &gamma, &grid)?;
        let worst = med
            .iter()
            .zip(&curve)
            .skip(1)
            .map(|((_, m), (_, b))| m / b)
            .fold(0.0, f64::max);
        passed &= worst <= 1.0;
        parts.push(format!("{label}: c1={:.3}, max median/bound={worst:.3}", consts.c1));
        metrics.push((label, worst));
    }
    let m: Vec<(&str, f64)> = metrics.iter().map(|(l, v)| (*l, *v)).collect();
    Ok(Check::new(passed, parts.join("; "), &m))
}

fn determinism_check(records: &[TrialRecord]) -> Result<Check> {
    let strip = |label: &str| -> Vec<TrialRecord> {
        let prefix = format!("{label}:");
        records
            .iter()
            .filter_map(|r| {
                r.method.strip_prefix(&prefix).map(|m| TrialRecord {
                    method: m.to_string(),
                    ..r.clone()
                })
            })
            .collect()
    };
    let (a, b) = (strip("run1"), strip("run2"));
    let same = !a.is_empty() && records_to_csv(&a)? == records_to_csv(&b)?;
    Ok(Check::new(
        same,
        format!("{} records per run, byte-identical: {same}", a.len()),
        &[("records", a.len() as f64)],
    ))
}

fn run_check(name: &str, records: &[TrialRecord]) -> Result<Check> {
    match name {
        "exactness" => Ok(tolerance_check(records, 100, 1e-9)),
        "sr_consistency" => Ok(tolerance_check(records, 50, 1e-8)),
        "po_identity" => Ok(tolerance_check(records, 50, 1e-9)),
        "eki_po_equivalence" => Ok(tolerance_check(records, 50, 1e-10)),
        "mean_rate_sr" => slope_check(records, "sr", Metric::Mean),
        "cov_rate_sr" => slope_check(records, "sr", Metric::Cov),
        "po_vs_sr" => {
            let sr: Vec<f64> = select(records, "sr").iter().map(|r| r.error_mean).collect();
            let po: Vec<f64> = select(records, "po").iter().map(|r| r.error_mean).collect();
            let (ms, mp) = (median(&sr).unwrap_or(f64::NAN), median(&po).unwrap_or(f64::NAN));
            let mut w = win_check(records, "sr", "po", Metric::Mean, 0.6)?;
            w.passed &= ms < mp;
            w.detail = format!("median SR {ms:.4} vs PO {mp:.4}; {}", w.detail);
            w.metrics.insert("median_sr".into(), ms);
            w.metrics.insert("median_po".into(), mp);
            Ok(w)
        }
        "effective_dim" => {
            let mut groups: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
            for r in select(records, "sr") {
                let r2 = r.r2.ok_or_else(|| Error::invalid("effective_dim records need r2"))?;
                groups.entry(r2.to_bits()).or_insert((r2, Vec::new())).1.push(r.error_mean);
            }
            let mut med: Vec<(f64, f64)> = groups
                .values()
                .map(|(r2, v)| (*r2, median(v).unwrap_or(f64::NAN)))
                .collect();
            med.sort_by(|a, b| a.0.total_cmp(&b.0));
            let increasing = med.len() >= 3 && med.windows(2).all(|w| w[0].1 < w[1].1);
            let text: Vec<String> = med.iter().map(|(r, m)| format!("r2={r}: {m:.4}")).collect();
            let metrics: Vec<(String, f64)> = med.iter().map(|(r, m)| (format!("median_r2_{r}"), *m)).collect();
            Ok(Check {
                passed: increasing,
                detail: format!("medians {}", text.join(", ")),
                metrics: metrics.into_iter().collect(),
            })
        }
        "loc_vs_sample" => {
            let mut w = win_check(records, "thresholded", "sample", Metric::Cov, 0.9)?;
            if let Some(r) = select(records, "thresholded").first().and_then(|r| r.radius) {
                w.detail = format!("{}; radius {r:.4}", w.detail);
                w.metrics.insert("radius".into(), r);
            }
            Ok(w)
        }
        "positive_part" => {
            let thr = select(records, "thresholded");
            let pp = select(records, "positive_part");
            let lookup: BTreeMap<(usize, u64), f64> =
                thr.iter().map(|r| ((r.n, r.seed), r.error_cov)).collect();
            let mut worst = f64::NEG_INFINITY;
            for r in &pp {
                let t = lookup
                    .get(&(r.n, r.seed))
                    .ok_or_else(|| Error::invalid("positive_part record without a thresholded partner"))?;
                worst = worst.max(r.error_cov - 2.0 * t);
            }
            Ok(Check::new(
                pp.len() == 100 && thr.len() == 100 && worst <= 1e-10,
                format!("{} instances, max of |B+ - B| - 2|B_rho - B| = {worst:.3e}", pp.len()),
                &[("instances", pp.len() as f64), ("worst_excess", worst)],
            ))
        }
        "eki_meanfield" => slope_check(records, "eki", Metric::Mean),
        "leki_vs_eki" => win_check(records, "leki", "eki", Metric::Mean, 0.75),
        "multistep_rate" => slope_check(records, "sr_enkf", Metric::Mean),
        "bound_overlay" => overlay_check(records, name),
        "sparsity_propagation" => {
            let worst = records
                .iter()
                .map(|r| r.error_mean / r.error_cov)
                .fold(0.0, f64::max);
            Ok(Check::new(
                records.len() == 20 && worst <= 1.0 + 1e-12,
                format!("{} instances, max lhs/rhs = {worst:.4}", records.len()),
                &[("instances", records.len() as f64), ("max_ratio", worst)],
            ))
        }
        "determinism" => determinism_check(records),
        other => Err(Error::invalid(format!("no criterion is attached to '{other}'"))),
    }
}

/// Evaluates the criterion attached to preset `name`.
pub fn evaluate(name: &str, records: &[TrialRecord]) -> Result<CriterionOutcome> {
    let c = CRITERIA
        .iter()
        .find(|c| c.preset == name)
        .ok_or_else(|| Error::invalid(format!("no criterion is attached to '{name}'")))?;
    let own: Vec<TrialRecord> = records
        .iter()
        .filter(|r| r.experiment == name)
        .cloned()
        .collect();
    if own.is_empty() {
        return Err(Error::invalid(format!("no records for experiment '{name}'")));
    }
    let outcome = match run_check(name, &own) {
        Ok(chk) => chk,
        Err(e) => Check::new(false, format!("evaluation failed: {e}"), &[]),
    };
    Ok(CriterionOutcome {
        id: c.id,
        preset: name.to_string(),
        title: c.title.to_string(),
        passed: outcome.passed,
        detail: outcome.detail,
        metrics: outcome.metrics,
    })
}

/// Outcomes for every criterion whose preset appears in `records`.
pub fn evaluate_records(records: &[TrialRecord]) -> Vec<CriterionOutcome> {
    let present: BTreeSet<&str> = records.iter().map(|r| r.experiment.as_str()).collect();
    CRITERIA
        .iter()
        .filter(|c| present.contains(c.preset))
        .filter_map(|c| evaluate(c.preset, records).ok())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MedianRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub count: usize,
    pub median_error_mean: f64,
    pub median_error_cov: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub r2: Option<f64>,
    pub medians: Vec<MedianRow>,
    pub fit_mean: Option<RateFit>,
    pub fit_cov: Option<RateFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WinRate {
    pub a: String,
    pub b: String,
    pub metric: Metric,
    pub win_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSummary {
    pub experiment: String,
    pub records: usize,
    pub methods: Vec<MethodSummary>,
    pub win_rates: Vec<WinRate>,
    pub criterion: Option<CriterionOutcome>,
}

/// Per-experiment medians, rate fits (when at least two `N` values exist),
/// pairwise win rates and the attached criterion, if any.
pub fn summarize(records: &[TrialRecord]) -> Vec<ExperimentSummary> {
    let mut by_exp: BTreeMap<&str, Vec<&TrialRecord>> = BTreeMap::new();
    for r in records {
        by_exp.entry(r.experiment.as_str()).or_default().push(r);
    }
    by_exp
        .into_iter()
        .map(|(exp, recs)| {
            let mut order: Vec<&str> = Vec::new();
            let mut groups: BTreeMap<(&str, Option<u64>), Vec<&TrialRecord>> = BTreeMap::new();
            for r in &recs {
                if !order.contains(&r.method.as_str()) {
                    order.push(&r.method);
                }
                groups
                    .entry((r.method.as_str(), r.r2.map(f64::to_bits)))
                    .or_default()
                    .push(r);
            }
            let mut methods: Vec<MethodSummary> = groups
                .iter()
                .map(|((m, r2), g)| {
                    let mean = medians_by_n(g, Metric::Mean);
                    let cov = medians_by_n(g, Metric::Cov);
                    let medians = mean
                        .iter()
                        .zip(&cov)
                        .map(|(&(n, me), &(_, mc))| MedianRow {
                            n,
                            count: g.iter().filter(|r| r.n == n).count(),
                            median_error_mean: me,
                            median_error_cov: mc,
                        })
                        .collect();
                    MethodSummary {
                        method: m.to_string(),
                        r2: r2.map(f64::from_bits),
                        medians,
                        fit_mean: fit_medians(g, Metric::Mean).ok(),
                        fit_cov: fit_medians(g, Metric::Cov).ok(),
                    }
                })
                .collect();
            methods.sort_by_key(|m| order.iter().position(|o| *o == m.method));
            let mut win_rates = Vec::new();
            for (i, a) in order.iter().enumerate() {
                for b in &order[i + 1..] {
                    let ra: Vec<&TrialRecord> = recs.iter().copied().filter(|r| r.method == *a).collect();
                    let rb: Vec<&TrialRecord> = recs.iter().copied().filter(|r| r.method == *b).collect();
                    for metric in [Metric::Mean, Metric::Cov] {
                        if let Ok(w) = compare_win_rate(&ra, &rb, metric) {
                            win_rates.push(WinRate {
                                a: a.to_string(),
                                b: b.to_string(),
                                metric,
                                win_rate: w,
                            });
                        }
                    }
                }
            }
            let owned: Vec<TrialRecord> = recs.iter().map(|r| (*r).clone()).collect();
            ExperimentSummary {
                experiment: exp.to_string(),
                records: recs.len(),
                methods,
                win_rates,
                criterion: evaluate(exp, &owned).ok(),
            }
        })
        .collect()
}
