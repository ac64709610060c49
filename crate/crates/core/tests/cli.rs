use std::fs;
use std::path::Path;

use enkf_lab::cli::{run, EXIT_INPUT, EXIT_OK};
use enkf_lab::experiments::{preset, read_csv};

fn enkf(args: &[&str]) -> i32 {
    let mut full = vec!["enkf-lab"];
    full.extend_from_slice(args);
    run(full)
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const SCALAR: &str = r#"{"a": [[1.0]], "gamma": [[1.0]], "y": [2.0], "ensemble": [[-1.0], [0.0], [1.0]]}"#;

#[test]
fn etkf_on_scalar_fixture_halves_the_variance() {
    let dir = tempfile::tempdir().unwrap();
    let problem = write(dir.path(), "p.json", SCALAR);
    let out = dir.path().join("r.json");
    let code = enkf(&["update", "--method", "etkf", "--problem", &problem, "--out", out.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    let s = v["sigma_hat"]["data"][0][0].as_f64().unwrap();
    assert!((s - 0.5).abs() < 1e-12);
    assert_eq!(v["sigma_hat"]["rows"], 1);
    assert!((v["mu_hat"][0].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn missing_gamma_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let problem = write(dir.path(), "p.json", r#"{"a": [[1.0]], "y": [2.0], "ensemble": [[0.0], [1.0]]}"#);
    assert_eq!(enkf(&["update", "--method", "po", "--problem", &problem]), EXIT_INPUT);
}

#[test]
fn unknown_method_and_bad_flags_are_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let problem = write(dir.path(), "p.json", SCALAR);
    assert_eq!(enkf(&["update", "--method", "kalman", "--problem", &problem]), EXIT_INPUT);
    assert_eq!(enkf(&["update", "--problem", &problem]), EXIT_INPUT);
    assert_eq!(enkf(&["frobnicate"]), EXIT_INPUT);
}

#[test]
fn same_seed_gives_identical_json() {
    let dir = tempfile::tempdir().unwrap();
    let problem = write(dir.path(), "p.json", SCALAR);
    let mut outputs = Vec::new();
    for name in ["a.json", "b.json"] {
        let out = dir.path().join(name);
        let code = enkf(&["update", "--method", "po", "--seed", "17", "--problem", &problem, "--out", out.to_str().unwrap()]);
        assert_eq!(code, EXIT_OK);
        outputs.push(fs::read(out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn every_update_method_runs() {
    let dir = tempfile::tempdir().unwrap();
    let problem = write(
        dir.path(),
        "p.json",
        r#"{"a": [[1.0, 0.0], [0.0, 1.0]], "gamma": [[1.0, 0.0], [0.0, 1.0]], "y": [1.0, -1.0],
            "prior": {"mean": [0.0, 0.0], "cov": [[1.0, 0.3], [0.3, 1.0]]}, "ensemble_size": 12,
            "rho_up": 0.1, "localization": {"mode": "explicit", "radius": 0.1}}"#,
    );
    for m in ["po", "etkf", "eakf", "loc-po", "loc-sr", "eki", "leki"] {
        let out = dir.path().join(format!("{m}.json"));
        let code = enkf(&["update", "--method", m, "--problem", &problem, "--out", out.to_str().unwrap()]);
        assert_eq!(code, EXIT_OK, "{m}");
    }
}

#[test]
fn experiment_preset_writes_records_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let code = enkf(&["experiment", "--preset", "mean_rate_sr", "--out-dir", out.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    let spec = preset("mean_rate_sr").unwrap();
    let recs = read_csv(fs::File::open(out.join("records.csv")).unwrap()).unwrap();
    assert_eq!(recs.len(), spec.n_grid.len() * spec.seeds);
    assert!(out.join("summary.json").exists());
}

#[test]
fn po_vs_sr_summary_has_win_rate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let code = enkf(&["experiment", "--preset", "po_vs_sr", "--out-dir", out.to_str().unwrap(), "--threads", "2"]);
    assert_eq!(code, EXIT_OK);
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let rates = v["experiments"][0]["win_rates"].as_array().unwrap();
    assert!(!rates.is_empty());
    for r in rates {
        let w = r["win_rate"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&w));
    }
}

#[test]
fn config_file_with_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "cfg.json",
        r#"{"experiment": {"id": "tiny", "kind": "po_vs_sr", "seeds": 30, "n_grid": [20],
            "problem": {"covariance": {"kind": "identity", "dim": 4}}}}"#,
    );
    let mut csvs = Vec::new();
    for (sub, seed) in [("a", "5"), ("b", "5"), ("c", "6")] {
        let out = dir.path().join(sub);
        let code = enkf(&["experiment", "--config", &cfg, "--master-seed", seed, "--out-dir", out.to_str().unwrap()]);
        assert_eq!(code, EXIT_OK);
        csvs.push(fs::read(out.join("records.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    assert_ne!(csvs[0], csvs[2]);
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "cfg.json",
        r#"{"experiment": {"id": "bad", "kind": "mean_rate", "seeds": 5, "n_grid": [20],
            "problem": {"covariance": {"kind": "identity", "dim": 4}}}}"#,
    );
    assert_eq!(enkf(&["experiment", "--config", &cfg]), EXIT_INPUT);
    let cfg = write(dir.path(), "cfg2.json", r#"{"preset": "no_such_preset"}"#);
    assert_eq!(enkf(&["experiment", "--config", &cfg]), EXIT_INPUT);
}

#[test]
fn report_handles_empty_and_two_point_csv() {
    let dir = tempfile::tempdir().unwrap();
    let header = "experiment,N,seed,method,error_mean,error_cov,offset_norm,radius,r2,r_inf\n";
    let empty = write(dir.path(), "empty.csv", header);
    assert_eq!(enkf(&["report", "--records", &empty]), EXIT_INPUT);
    let two = write(
        dir.path(),
        "two.csv",
        &format!("{header}synthetic,10,0,sr,1.0,1.0,,,,\nsynthetic,1000,0,sr,0.1,0.1,,,,\n"),
    );
    let out = dir.path().join("rep");
    assert_eq!(enkf(&["report", "--records", &two, "--out-dir", out.to_str().unwrap()]), EXIT_OK);
    let text = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(text.contains("slope_mean -0.5000"), "{text}");
    let bad = write(dir.path(), "bad.csv", "x,y\n1,2\n");
    assert_eq!(enkf(&["report", "--records", &bad]), EXIT_INPUT);
}
