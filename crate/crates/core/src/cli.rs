//! `enkf-lab update|experiment|report`.
//!
//! Exit codes: 0 success, 2 parse or validation failure, 3 numeric failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::eki::{eki_update, leki_update, EkiProblem};
use crate::error::{Error, Result};
use crate::estimators::LocalizationConfig;
use crate::experiments::{
    preset, read_csv, run_experiment_detailed, summarize, write_csv, ExperimentSpec,
    ExperimentSummary, TrialRecord, ACCEPTANCE_PRESETS,
};
use crate::matrix::{Matrix, Vector};
use crate::models::{sample_ensemble, Ensemble, ForwardMap, GaussianPrior, LinearMap, TanhFixture};
use crate::operators::LinearProblem;
use crate::updates::{
    eakf_update, etkf_update, localized_po_update, localized_sr_update, po_update, UpdateResult,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "enkf-lab", version, about = "Ensemble Kalman updates and Monte Carlo rate experiments")]
struct Cli {
    /// Progress messages on stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one ensemble update and write the result as JSON.
    Update {
        /// po, etkf, eakf, loc-po, loc-sr, eki or leki; overrides the problem file.
        #[arg(long)]
        method: Option<String>,
        /// JSON problem file.
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run experiments from a JSON config or preset names.
    Experiment {
        /// JSON run config.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Preset name; `acceptance` runs every acceptance preset.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        master_seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Worker threads; falls back to ENKF_LAB_THREADS.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Summarize a records CSV: medians, slopes, win rates, criteria.
    Report {
        /// Records CSV written by `experiment`.
        #[arg(long)]
        records: PathBuf,
        /// Directory for report.json and report.txt; next to the CSV when omitted.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

/// Experiment run configuration; exactly one of the sources must be set.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub presets: Vec<String>,
    #[serde(default)]
    pub experiment: Option<ExperimentSpec>,
    #[serde(default)]
    pub experiments: Vec<ExperimentSpec>,
    #[serde(default)]
    pub master_seed: Option<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub verbose: bool,
}

impl RunConfig {
    /// Expands presets (including `acceptance`) and applies the seed override.
    pub fn specs(&self) -> Result<Vec<ExperimentSpec>> {
        let mut names: Vec<String> = self.presets.clone();
        names.extend(self.preset.clone());
        let mut specs = Vec::new();
        for n in &names {
            if n == "acceptance" {
                for p in ACCEPTANCE_PRESETS {
                    specs.push(preset(p)?);
                }
            } else {
                specs.push(preset(n).map_err(|e| Error::invalid(format!("preset: {e}")))?);
            }
        }
        specs.extend(self.experiment.clone());
        specs.extend(self.experiments.iter().cloned());
        if specs.is_empty() {
            return Err(Error::invalid(
                "config: one of preset, presets, experiment or experiments is required",
            ));
        }
        if let Some(seed) = self.master_seed {
            for s in &mut specs {
                s.master_seed = seed;
            }
        }
        for s in &specs {
            s.validate()
                .map_err(|e| Error::invalid(format!("experiment '{}': {e}", s.id)))?;
        }
        Ok(specs)
    }
}

/// Dense matrix as written to JSON: row-major nested arrays with dims.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Vec<f64>>,
}

impl From<&Matrix> for DenseMatrix {
    fn from(m: &Matrix) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }
}

fn matrix_from_rows(rows: &[Vec<f64>], field: &str) -> Result<Matrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::invalid(format!("{field}: expected a non-empty rectangular array")));
    }
    Ok(Matrix::from_fn(r, c, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct PriorInput {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum ForwardInput {
    Linear,
    Tanh { k: usize },
}

/// Single-update request.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct UpdateRequest {
    #[serde(default)]
    method: Option<String>,
    #[serde(default)]
    seed: Option<u64>,
    /// Observation operator `k × d`; required for linear updates.
    #[serde(default)]
    a: Option<Vec<Vec<f64>>>,
    gamma: Vec<Vec<f64>>,
    y: Vec<f64>,
    /// Members as rows (`N × d`).
    #[serde(default)]
    ensemble: Option<Vec<Vec<f64>>>,
    /// Sampled when no ensemble is given.
    #[serde(default)]
    prior: Option<PriorInput>,
    #[serde(default)]
    ensemble_size: Option<usize>,
    #[serde(default)]
    localization: Option<LocalizationConfig>,
    /// EKI forward map; `linear` uses `a`.
    #[serde(default)]
    forward: Option<ForwardInput>,
    #[serde(default)]
    rho_up: Option<f64>,
    #[serde(default)]
    rho_pp: Option<f64>,
}

#[derive(Debug, Serialize)]
struct DiagnosticsOutput {
    offset_norm: Option<f64>,
    radius_used: Option<f64>,
    mean_drift: Option<f64>,
    gain: DenseMatrix,
}

#[derive(Debug, Serialize)]
struct UpdateOutput {
    method: String,
    seed: u64,
    mu_hat: Vec<f64>,
    sigma_hat: DenseMatrix,
    /// Updated members as rows.
    ensemble: DenseMatrix,
    diagnostics: DiagnosticsOutput,
}

const METHODS: [&str; 7] = ["po", "etkf", "eakf", "loc-po", "loc-sr", "eki", "leki"];

fn run_update(req: &UpdateRequest, method: &str, seed: u64) -> Result<UpdateResult> {
    if !METHODS.contains(&method) {
        return Err(Error::invalid(format!(
            "method: '{method}' is not one of {}",
            METHODS.join(", ")
        )));
    }
    let gamma = matrix_from_rows(&req.gamma, "gamma")?;
    let y = Vector::from_vec(req.y.clone());
    let ensemble = match (&req.ensemble, &req.prior) {
        (Some(rows), _) => Ensemble::new(matrix_from_rows(rows, "ensemble")?.transpose())
            .map_err(|e| Error::invalid(format!("ensemble: {e}")))?,
        (None, Some(p)) => {
            let n = req
                .ensemble_size
                .ok_or_else(|| Error::invalid("ensemble_size: required when sampling from prior"))?;
            let prior = GaussianPrior::new(Vector::from_vec(p.mean.clone()), matrix_from_rows(&p.cov, "prior.cov")?)
                .map_err(|e| Error::invalid(format!("prior: {e}")))?;
            sample_ensemble(&prior, n, crate::rng::derive_seed(seed, crate::rng::stream::PRIOR))?
        }
        (None, None) => return Err(Error::invalid("ensemble: provide ensemble or prior")),
    };
    let d = ensemble.dim();
    let a = req
        .a
        .as_ref()
        .map(|rows| matrix_from_rows(rows, "a"))
        .transpose()?;
    let pert = crate::rng::derive_seed(seed, crate::rng::stream::PERTURBATION);
    if method == "eki" || method == "leki" {
        let forward: Arc<dyn ForwardMap> = match req.forward.as_ref().unwrap_or(&ForwardInput::Linear) {
            ForwardInput::Linear => Arc::new(LinearMap::new(
                a.ok_or_else(|| Error::invalid("a: required for a linear forward map"))?,
            )?),
            ForwardInput::Tanh { k } => Arc::new(
                TanhFixture::new(d, *k).map_err(|e| Error::invalid(format!("forward: {e}")))?,
            ),
        };
        let prob = EkiProblem::new(forward, gamma, y)
            .map_err(|e| Error::invalid(format!("problem: {e}")))?;
        return if method == "eki" {
            eki_update(&ensemble, &prob, pert)
        } else {
            let rho_up = req.rho_up.ok_or_else(|| Error::invalid("rho_up: required for leki"))?;
            let rho_pp = req.rho_pp.unwrap_or(rho_up);
            leki_update(&ensemble, &prob, rho_up, rho_pp, pert)
        };
    }
    let a = a.ok_or_else(|| Error::invalid("a: required for linear updates"))?;
    let problem =
        LinearProblem::new(a, gamma, y).map_err(|e| Error::invalid(format!("problem: {e}")))?;
    let loc = req.localization.unwrap_or_default();
    match method {
        "po" => po_update(&ensemble, &problem, pert),
        "etkf" => etkf_update(&ensemble, &problem, None),
        "eakf" => eakf_update(&ensemble, &problem),
        "loc-po" => localized_po_update(&ensemble, &problem, &loc, pert),
        _ => localized_sr_update(&ensemble, &problem, &loc),
    }
}

fn cmd_update(method: Option<String>, problem: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<String> {
    let text = read_text(problem)?;
    let req: UpdateRequest = serde_json::from_str(&text)
        .map_err(|e| Error::invalid(format!("{}: {e}", problem.display())))?;
    let method = method
        .or_else(|| req.method.clone())
        .ok_or_else(|| Error::invalid("method: not given on the command line or in the problem file"))?;
    let seed = seed.or(req.seed).unwrap_or(0);
    let res = run_update(&req, &method, seed)?;
    let output = UpdateOutput {
        method,
        seed,
        mu_hat: res.mu_hat.iter().copied().collect(),
        sigma_hat: (&res.sigma_hat).into(),
        ensemble: (&res.ensemble.members().transpose()).into(),
        diagnostics: DiagnosticsOutput {
            offset_norm: res.diagnostics.offset_norm,
            radius_used: res.diagnostics.radius_used,
            mean_drift: res.diagnostics.mean_drift,
            gain: (&res.diagnostics.gain).into(),
        },
    };
    let json = serde_json::to_string_pretty(&output).expect("serializable") + "\n";
    if let Some(path) = out {
        write_text(path, &json)?;
    }
    Ok(json)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::invalid(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if let Some(n) = flag {
        return if n > 0 { Ok(Some(n)) } else { Err(Error::invalid("threads: must be >= 1")) };
    }
    match std::env::var("ENKF_LAB_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::invalid(format!("ENKF_LAB_THREADS: expected a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(None),
    }
}

#[derive(Debug, Serialize)]
struct ExperimentReport {
    experiments: Vec<ExperimentSummary>,
    trials: usize,
    failed_trials: usize,
}

fn cmd_experiment(cfg: RunConfig, threads: Option<usize>, verbose: bool) -> Result<String> {
    let specs = cfg.specs()?;
    let out_dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("enkf-lab-out"));
    let run_all = || -> Result<(Vec<TrialRecord>, usize, usize)> {
        let mut records = Vec::new();
        let (mut trials, mut failed) = (0, 0);
        for s in &specs {
            let start = Instant::now();
            let run = run_experiment_detailed(s)?;
            if verbose || cfg.verbose {
                eprintln!(
                    "{}: {} records, {} failed trials, {:.2}s",
                    s.id,
                    run.records.len(),
                    run.failed,
                    start.elapsed().as_secs_f64()
                );
            }
            trials += run.trials;
            failed += run.failed;
            records.extend(run.records);
        }
        Ok((records, trials, failed))
    };
    let (records, trials, failed) = match thread_count(threads)? {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Numeric(format!("thread pool: {e}")))?
            .install(run_all)?,
        None => run_all()?,
    };
    fs::create_dir_all(&out_dir)
        .map_err(|e| Error::invalid(format!("out_dir {}: {e}", out_dir.display())))?;
    let csv_path = out_dir.join("records.csv");
    let file = fs::File::create(&csv_path)
        .map_err(|e| Error::invalid(format!("{}: {e}", csv_path.display())))?;
    write_csv(&records, std::io::BufWriter::new(file))?;
    let summaries = summarize(&records);
    let report = ExperimentReport {
        experiments: summaries.clone(),
        trials,
        failed_trials: failed,
    };
    write_text(
        &out_dir.join("summary.json"),
        &(serde_json::to_string_pretty(&report).expect("serializable") + "\n"),
    )?;
    Ok(render_table(&summaries))
}

fn cmd_report(path: &Path, out_dir: Option<&Path>) -> Result<String> {
    let file = fs::File::open(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let records = read_csv(std::io::BufReader::new(file))?;
    if records.is_empty() {
        return Err(Error::invalid(format!("{}: no records", path.display())));
    }
    let summaries = summarize(&records);
    let table = render_table(&summaries);
    let dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());
    write_text(
        &dir.join("report.json"),
        &(serde_json::to_string_pretty(&summaries).expect("serializable") + "\n"),
    )?;
    write_text(&dir.join("report.txt"), &table)?;
    Ok(table)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"))
}

/// Aligned plain-text rendering of experiment summaries.
pub fn render_table(summaries: &[ExperimentSummary]) -> String {
    let mut out = String::new();
    for s in summaries {
        let _ = writeln!(out, "== {} ({} records)", s.experiment, s.records);
        let _ = writeln!(
            out,
            "{:<24} {:>8} {:>8} {:>6} {:>14} {:>14}",
            "method", "r2", "N", "count", "median_mean", "median_cov"
        );
        for m in &s.methods {
            for row in &m.medians {
                let _ = writeln!(
                    out,
                    "{:<24} {:>8} {:>8} {:>6} {:>14.6e} {:>14.6e}",
                    m.method,
                    fmt_opt(m.r2),
                    row.n,
                    row.count,
                    row.median_error_mean,
                    row.median_error_cov
                );
            }
            if let (Some(fm), Some(fc)) = (m.fit_mean, m.fit_cov) {
                let _ = writeln!(
                    out,
                    "{:<24} slope_mean {:.4} slope_cov {:.4} ({} points)",
                    m.method, fm.slope, fc.slope, fm.points
                );
            }
        }
        for w in &s.win_rates {
            let _ = writeln!(
                out,
                "win_rate {} over {} ({:?}): {:.4}",
                w.a, w.b, w.metric, w.win_rate
            );
        }
        if let Some(c) = &s.criterion {
            let _ = writeln!(
                out,
                "{} C{:02} {}: {} | {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.id,
                c.preset,
                c.title,
                c.detail
            );
        }
        out.push('\n');
    }
    out
}

fn exit_code(e: &Error) -> i32 {
    if e.is_input_error() {
        EXIT_INPUT
    } else {
        EXIT_NUMERIC
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the exit code. Results go to stdout, messages to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Update { method, problem, seed, out } => {
            cmd_update(method, &problem, seed, out.as_deref()).map(|json| {
                if out.is_none() {
                    print!("{json}");
                }
            })
        }
        Command::Experiment { config, preset, master_seed, out_dir, threads } => {
            let cfg = match (config, preset) {
                (Some(path), _) => read_text(&path).and_then(|t| {
                    serde_json::from_str::<RunConfig>(&t)
                        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
                }),
                (None, Some(p)) => Ok(RunConfig {
                    preset: Some(p),
                    ..RunConfig::default()
                }),
                (None, None) => Err(Error::invalid("config: pass --config or --preset")),
            };
            cfg.and_then(|mut cfg| {
                cfg.master_seed = master_seed.or(cfg.master_seed);
                cfg.out_dir = out_dir.or(cfg.out_dir);
                cmd_experiment(cfg, threads, cli.verbose)
            })
            .map(|table| print!("{table}"))
        }
        Command::Report { records, out_dir } => {
            cmd_report(&records, out_dir.as_deref()).map(|table| print!("{table}"))
        }
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
