//! Shipped experiment configurations. Each acceptance criterion is executed
//! by exactly one preset in [`ACCEPTANCE_PRESETS`].

use super::{Calibration, ExperimentKind, ExperimentOptions, ExperimentSpec, ForwardSpec, ProblemSpec};
use crate::error::{Error, Result};
use crate::models::CovarianceSpec;

pub const MASTER_SEED: u64 = 20_240_611;

/// Presets in criterion order.
pub const ACCEPTANCE_PRESETS: [&str; 16] = [
    "exactness",
    "sr_consistency",
    "po_identity",
    "mean_rate_sr",
    "cov_rate_sr",
    "po_vs_sr",
    "effective_dim",
    "loc_vs_sample",
    "positive_part",
    "eki_po_equivalence",
    "eki_meanfield",
    "leki_vs_eki",
    "multistep_rate",
    "bound_overlay",
    "sparsity_propagation",
    "determinism",
];

const EXTRA_PRESETS: [&str; 2] = ["radius_sweep", "loc_updates"];

pub fn preset_names() -> Vec<&'static str> {
    ACCEPTANCE_PRESETS
        .iter()
        .chain(EXTRA_PRESETS.iter())
        .copied()
        .collect()
}

fn base(id: &str, kind: ExperimentKind, covariance: CovarianceSpec, forward: ForwardSpec) -> ExperimentSpec {
    ExperimentSpec {
        id: id.to_string(),
        kind,
        master_seed: MASTER_SEED,
        seeds: 100,
        n_grid: vec![2],
        problem: ProblemSpec {
            covariance,
            prior_mean: None,
            forward,
            noise: None,
        },
        methods: Vec::new(),
        calibration: Calibration::default(),
        options: ExperimentOptions::default(),
    }
}

fn ar1(dim: usize) -> CovarianceSpec {
    CovarianceSpec::Ar1 {
        dim,
        phi: 0.5,
        variance: 1.0,
    }
}

fn geometric_50() -> CovarianceSpec {
    CovarianceSpec::GeometricSpectrum { dim: 50, r2: 8.0 }
}

/// Random-instance checks: `d <= 20`, `k <= 20`.
fn check(id: &str, kind: ExperimentKind, seeds: usize, n: usize) -> ExperimentSpec {
    let mut s = base(
        id,
        kind,
        CovarianceSpec::Identity { dim: 20 },
        ForwardSpec::Gaussian { k: 20 },
    );
    s.seeds = seeds;
    s.n_grid = vec![n];
    s
}

pub fn preset(name: &str) -> Result<ExperimentSpec> {
    use ExperimentKind as K;
    let spec = match name {
        "exactness" => check(name, K::Exactness, 100, 2),
        "sr_consistency" => check(name, K::SrConsistency, 50, 12),
        "po_identity" => check(name, K::PoIdentity, 50, 12),
        "eki_po_equivalence" => check(name, K::EkiPoEquivalence, 50, 12),
        "mean_rate_sr" | "cov_rate_sr" | "bound_overlay" => {
            let kind = match name {
                "mean_rate_sr" => K::MeanRate,
                "cov_rate_sr" => K::CovRate,
                _ => K::BoundOverlay,
            };
            let mut s = base(name, kind, geometric_50(), ForwardSpec::Identity);
            s.seeds = 200;
            s.n_grid = vec![50, 200, 800, 3200];
            s
        }
        "po_vs_sr" => {
            let mut s = base(name, K::PoVsSr, CovarianceSpec::Identity { dim: 10 }, ForwardSpec::Identity);
            s.seeds = 500;
            s.n_grid = vec![50];
            s
        }
        "effective_dim" => {
            let mut s = base(name, K::EffectiveDim, CovarianceSpec::Identity { dim: 64 }, ForwardSpec::Identity);
            s.n_grid = vec![100];
            s.options.r2_grid = vec![2.0, 8.0, 32.0];
            s
        }
        "loc_vs_sample" => {
            let mut s = base(name, K::LocVsSample, ar1(400), ForwardSpec::Identity);
            s.n_grid = vec![50];
            s
        }
        "positive_part" => {
            let mut s = base(name, K::PositivePart, ar1(100), ForwardSpec::Identity);
            s.n_grid = vec![30];
            s
        }
        "radius_sweep" => {
            let mut s = base(name, K::RadiusSweep, ar1(200), ForwardSpec::Identity);
            s.seeds = 50;
            s.n_grid = vec![25, 50, 100, 200];
            s.options.c_grid = vec![0.25, 0.5, 1.0, 2.0, 4.0];
            s
        }
        "loc_updates" => {
            let mut s = base(name, K::MeanRate, ar1(100), ForwardSpec::Banded { k: 100, bandwidth: 1 });
            s.seeds = 50;
            s.n_grid = vec![25, 50, 100];
            s.methods = vec!["po".into(), "sr".into(), "loc_po".into(), "loc_sr".into()];
            s
        }
        "eki_meanfield" => {
            let mut s = base(name, K::EkiMeanfield, ar1(20), ForwardSpec::Tanh { k: 10 });
            s.seeds = 200;
            s.n_grid = vec![50, 200, 800];
            s
        }
        "leki_vs_eki" => {
            let mut s = base(name, K::LekiVsEki, ar1(200), ForwardSpec::Tanh { k: 100 });
            s.n_grid = vec![40];
            s
        }
        "multistep_rate" => {
            let mut s = base(
                name,
                K::MultistepRate,
                CovarianceSpec::Identity { dim: 10 },
                ForwardSpec::Gaussian { k: 5 },
            );
            s.n_grid = vec![100, 400, 1600];
            s
        }
        "sparsity_propagation" => {
            let mut s = base(name, K::SparsityPropagation, CovarianceSpec::Identity { dim: 1 }, ForwardSpec::Identity);
            s.seeds = 5;
            s.n_grid = vec![20, 40, 60, 80];
            s
        }
        "determinism" => {
            let mut s = base(name, K::Determinism, CovarianceSpec::Identity { dim: 1 }, ForwardSpec::Identity);
            s.seeds = 1;
            s.options.inner = Some("po_vs_sr".into());
            s
        }
        other => {
            return Err(Error::invalid(format!(
                "unknown preset '{other}' (available: {})",
                preset_names().join(", ")
            )))
        }
    };
    Ok(spec)
}
