//! Medians, log-log rate fits, paired win rates and upper-bound curves.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrialRecord;
use crate::error::{Error, Result};
use crate::estimators::effective_dims;
use crate::matrix::{operator_norm, Matrix};

/// Least-squares line through `(ln N, ln error)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub residual_std: f64,
    pub points: usize,
    /// Standard error of the slope; zero for two-point fits.
    pub slope_stderr: f64,
    /// 95% confidence interval for the slope (Student t).
    pub slope_ci: (f64, f64),
}

/// Which error column a statistic reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mean,
    Cov,
}

impl Metric {
    pub fn of(self, r: &TrialRecord) -> f64 {
        match self {
            Metric::Mean => r.error_mean,
            Metric::Cov => r.error_cov,
        }
    }
}

/// Median with the midpoint convention for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Two-sided 97.5% Student-t quantiles for 1..=30 degrees of freedom.
const T975: [f64; 30] = [
    12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228, 2.201, 2.179, 2.160,
    2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064, 2.060, 2.056,
    2.052, 2.048, 2.045, 2.042,
];

fn t_quantile(df: usize) -> f64 {
    if df == 0 {
        f64::INFINITY
    } else {
        T975.get(df - 1).copied().unwrap_or(1.96)
    }
}

/// Fits `ln error = intercept + slope ln N`.
pub fn fit_rate(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 2 {
        return Err(Error::invalid("a rate fit needs at least 2 points"));
    }
    if points.iter().any(|&(n, e)| !(n > 0.0) || !(e > 0.0) || !n.is_finite() || !e.is_finite()) {
        return Err(Error::invalid("rate fits need positive, finite N and error values"));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("rate fits need at least two distinct N values"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let df = points.len() - 2;
    let (residual_std, slope_stderr) = if df > 0 {
        let s = (sse / df as f64).sqrt();
        (s, s / sxx.sqrt())
    } else {
        (0.0, 0.0)
    };
    let half = if df > 0 { t_quantile(df) * slope_stderr } else { 0.0 };
    Ok(RateFit {
        slope,
        intercept,
        residual_std,
        points: points.len(),
        slope_stderr,
        slope_ci: (slope - half, slope + half),
    })
}

/// Median of `metric` for each `N`, in increasing `N`.
pub fn medians_by_n(records: &[&TrialRecord], metric: Metric) -> Vec<(usize, f64)> {
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in records {
        groups.entry(r.n).or_default().push(metric.of(r));
    }
    groups
        .into_iter()
        .filter_map(|(n, v)| median(&v).map(|m| (n, m)))
        .collect()
}

/// Fit of the per-`N` medians of `metric`.
pub fn fit_medians(records: &[&TrialRecord], metric: Metric) -> Result<RateFit> {
    let pts: Vec<(f64, f64)> = medians_by_n(records, metric)
        .into_iter()
        .map(|(n, m)| (n as f64, m))
        .collect();
    fit_rate(&pts)
}

type PairKey = (usize, u64, Option<u64>);

fn key(r: &TrialRecord) -> PairKey {
    (r.n, r.seed, r.r2.map(f64::to_bits))
}

/// Fraction of `(N, seed)` pairs where `a` has the smaller error; ties count 1/2.
pub fn compare_win_rate(a: &[&TrialRecord], b: &[&TrialRecord], metric: Metric) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::invalid("win rate needs at least one pair"));
    }
    let mut lookup: BTreeMap<PairKey, f64> = BTreeMap::new();
    for r in b {
        if lookup.insert(key(r), metric.of(r)).is_some() {
            return Err(Error::invalid(format!(
                "duplicate record for N={} seed={} in the comparison set",
                r.n, r.seed
            )));
        }
    }
    if lookup.len() != a.len() {
        return Err(Error::invalid(format!(
            "unpaired records: {} vs {}",
            a.len(),
            lookup.len()
        )));
    }
    let mut score = 0.0;
    for r in a {
        let other = lookup.get(&key(r)).ok_or_else(|| {
            Error::invalid(format!("record N={} seed={} has no partner", r.n, r.seed))
        })?;
        let mine = metric.of(r);
        if mine < *other {
            score += 1.0;
        } else if mine == *other {
            score += 0.5;
        }
    }
    Ok(score / a.len() as f64)
}

/// Which bound curve to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Mean,
    Cov,
}

/// Calibration constants of a bound curve; `phi = 1` adds the
/// perturbed-observation term, `phi = 0` drops it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub c1: f64,
    pub c2: f64,
    pub phi: f64,
}

/// Shape of the bound for a given `N` with `c1 = c2 = 1`, split into the
/// common part and the perturbation part.
fn bound_terms(kind: BoundKind, r2c: f64, r2g: f64, n: f64) -> (f64, f64) {
    let x = r2c / n;
    let g = r2g / n;
    match kind {
        BoundKind::Mean => (x.sqrt().max(x.powf(1.5)), g.sqrt().max(x * g.sqrt())),
        BoundKind::Cov => (
            x.sqrt().max(x * x),
            x.sqrt()
                .max(x.powi(3))
                .max(g.sqrt().max(g) * 1f64.max(x * x)),
        ),
    }
}

/// Upper-bound curves for the mean and covariance deviation of one update.
///
/// Mean: `c1 (√(r₂(C)/N) ∨ (r₂(C)/N)^{3/2}) + φ c2 (√(r₂(Γ)/N) ∨ (r₂(C)/N)√(r₂(Γ)/N))`.
///
/// Covariance: `c1 (√(r₂(C)/N) ∨ (r₂(C)/N)²) + φ c2 (√(r₂(C)/N) ∨ (r₂(C)/N)³ ∨ (√(r₂(Γ)/N) ∨ r₂(Γ)/N)(1 ∨ (r₂(C)/N)²))`.
pub fn theorem_bound_curve(
    kind: BoundKind,
    constants: BoundConstants,
    c: &Matrix,
    gamma: &Matrix,
    n_grid: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let BoundConstants { c1, c2, phi } = constants;
    if !(c1 >= 0.0) || !(c2 >= 0.0) || !(0.0..=1.0).contains(&phi) {
        return Err(Error::invalid(format!(
            "bound constants need c1, c2 >= 0 and phi in [0, 1], got c1={c1}, c2={c2}, phi={phi}"
        )));
    }
    if n_grid.iter().any(|&n| n == 0) {
        return Err(Error::invalid("N grid entries must be >= 1"));
    }
    let r2c = effective_dims(c)?.r2;
    let r2g = trace_ratio(gamma)?;
    Ok(n_grid
        .iter()
        .map(|&n| {
            let (common, extra) = bound_terms(kind, r2c, r2g, n as f64);
            (n, c1 * common + phi * c2 * extra)
        })
        .collect())
}

fn trace_ratio(m: &Matrix) -> Result<f64> {
    Ok(m.trace() / operator_norm(m)?)
}

/// Chooses `c1` (with `c2 = c1`) so that the curve equals `target` at `n0`.
pub fn calibrate_bound(
    kind: BoundKind,
    phi: f64,
    c: &Matrix,
    gamma: &Matrix,
    n0: usize,
    target: f64,
) -> Result<BoundConstants> {
    let unit = BoundConstants { c1: 1.0, c2: 1.0, phi };
    let at = theorem_bound_curve(kind, unit, c, gamma, &[n0])?[0].1;
    let scale = target / at;
    Ok(BoundConstants {
        c1: scale,
        c2: scale,
        phi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    fn rec(n: usize, seed: u64, e: f64) -> TrialRecord {
        TrialRecord {
            experiment: "t".into(),
            n,
            seed,
            method: "m".into(),
            error_mean: e,
            error_cov: e,
            offset_norm: None,
            radius: None,
            r2: None,
            r_inf: None,
        }
    }

    #[test]
    fn fit_examples() {
        let f = fit_rate(&[(10.0, 1.0), (1000.0, 0.1)]).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-15);
        let f = fit_rate(&[(10.0, 2.0), (100.0, 2.0), (1000.0, 2.0)]).unwrap();
        assert!(f.slope.abs() < 1e-15);
        assert!(fit_rate(&[(10.0, 0.0), (20.0, 1.0)]).is_err());
        assert!(fit_rate(&[(10.0, 1.0)]).is_err());
    }

    #[test]
    fn fit_recovers_synthetic_rate() {
        let mut rng = rng_from_seed(12);
        let pts: Vec<(f64, f64)> = [1e2, 1e3, 1e4, 1e5]
            .iter()
            .map(|&n: &f64| (n, 3.0 * n.powf(-0.5) * (1.0 + rng.random_range(-0.1..0.1))))
            .collect();
        let f = fit_rate(&pts).unwrap();
        assert!((f.slope + 0.5).abs() < 0.05);
        assert!(f.slope_ci.0 <= f.slope && f.slope <= f.slope_ci.1);
    }

    #[test]
    fn win_rate_examples() {
        let a: Vec<TrialRecord> = (0..4).map(|s| rec(10, s, 1.0)).collect();
        let ar: Vec<&TrialRecord> = a.iter().collect();
        assert_eq!(compare_win_rate(&ar, &ar, Metric::Mean).unwrap(), 0.5);
        let b: Vec<TrialRecord> = (0..4).map(|s| rec(10, s, 2.0)).collect();
        let br: Vec<&TrialRecord> = b.iter().collect();
        assert_eq!(compare_win_rate(&ar, &br, Metric::Mean).unwrap(), 1.0);
        assert_eq!(compare_win_rate(&br, &ar, Metric::Mean).unwrap(), 0.0);
        let short: Vec<&TrialRecord> = br[..3].to_vec();
        assert!(compare_win_rate(&ar, &short, Metric::Mean).is_err());
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn bound_curve_examples() {
        let c = Matrix::identity(4, 4);
        let g = Matrix::identity(2, 2);
        let sr = BoundConstants { c1: 1.0, c2: 1.0, phi: 0.0 };
        let curve = theorem_bound_curve(BoundKind::Mean, sr, &c, &g, &[16, 64]).unwrap();
        // N >= r2: the square-root branch dominates
        assert!((curve[0].1 - 0.5).abs() < 1e-15);
        assert!((curve[1].1 - 0.25).abs() < 1e-15);
        let po = BoundConstants { phi: 1.0, ..sr };
        let with = theorem_bound_curve(BoundKind::Mean, po, &c, &g, &[16]).unwrap();
        assert!((with[0].1 - (0.5 + (2.0f64 / 16.0).sqrt())).abs() < 1e-15);
        let cov = theorem_bound_curve(BoundKind::Cov, sr, &c, &g, &[1]).unwrap();
        assert!((cov[0].1 - 16.0).abs() < 1e-12);
        let cal = calibrate_bound(BoundKind::Mean, 0.0, &c, &g, 16, 2.0).unwrap();
        assert!((cal.c1 - 4.0).abs() < 1e-15);
        assert!(theorem_bound_curve(BoundKind::Mean, BoundConstants { c1: -1.0, ..sr }, &c, &g, &[4]).is_err());
    }
}
