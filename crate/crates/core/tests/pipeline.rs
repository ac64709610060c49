use enkf_lab::experiments::{preset, run_experiment};
use enkf_lab::filter::{kalman_filter, sr_enkf, FilterProblem, FilterStep};
use enkf_lab::matrix::operator_norm;
use enkf_lab::models::{make_covariance, sample_ensemble, CovarianceSpec, GaussianPrior};
use enkf_lab::operators::LinearProblem;
use enkf_lab::oracle::exact_posterior;
use enkf_lab::updates::{eakf_update, etkf_update, po_update};
use enkf_lab::{Matrix, Vector};

#[test]
fn extra_presets_fill_their_grids() {
    for name in ["radius_sweep", "loc_updates"] {
        let spec = preset(name).unwrap();
        let recs = run_experiment(&spec).unwrap();
        let per_trial = match name {
            "radius_sweep" => 1 + spec.options.c_grid.len(),
            _ => spec.methods.len(),
        };
        assert_eq!(recs.len(), spec.n_grid.len() * spec.seeds * per_trial, "{name}");
    }
}

#[test]
fn large_ensembles_approach_the_posterior() {
    let c = make_covariance(&CovarianceSpec::Ar1 { dim: 6, phi: 0.6, variance: 2.0 }).unwrap();
    let prior = GaussianPrior::centered(c.clone()).unwrap();
    let a = Matrix::from_fn(3, 6, |i, j| if j == 2 * i { 1.0 } else { 0.0 });
    let problem = LinearProblem::new(a, Matrix::identity(3, 3) * 0.5, Vector::from_vec(vec![1.0, 0.0, -1.0])).unwrap();
    let (mu, sigma) = exact_posterior(&prior.mean, &c, &problem).unwrap();
    let mut errs = Vec::new();
    for n in [50, 5000] {
        let e = sample_ensemble(&prior, n, 3).unwrap();
        let sr = eakf_update(&e, &problem).unwrap();
        let po = po_update(&e, &problem, 4).unwrap();
        if n <= 500 {
            // the transform route needs an N x N eigendecomposition
            let t = etkf_update(&e, &problem, None).unwrap();
            assert!((&sr.sigma_hat - &t.sigma_hat).abs().max() < 1e-10);
        }
        errs.push((
            (&sr.mu_hat - &mu).norm(),
            operator_norm(&(&sr.sigma_hat - &sigma)).unwrap(),
            (&po.mu_hat - &mu).norm(),
        ));
    }
    assert!(errs[1].0 < errs[0].0 && errs[1].1 < errs[0].1 && errs[1].2 < errs[0].2);
    assert!(errs[1].0 < 0.05 && errs[1].1 < 0.1);
}

#[test]
fn ensemble_filter_tracks_the_kalman_filter() {
    let d = 4;
    let m = Matrix::from_fn(d, d, |i, j| if (i + 1) % d == j { 0.95 } else { 0.0 });
    let a = Matrix::from_fn(2, d, |i, j| if j == i { 1.0 } else { 0.0 });
    let steps = (0..4)
        .map(|t| FilterStep {
            dynamics: m.clone(),
            obs: a.clone(),
            y: Vector::from_vec(vec![t as f64 * 0.3, -0.2]),
        })
        .collect();
    let fp = FilterProblem::new(steps, Matrix::identity(2, 2), Vector::zeros(d), Matrix::identity(d, d)).unwrap();
    let kf = kalman_filter(&fp).unwrap();
    let en = sr_enkf(&fp, 4000, 12).unwrap();
    for (k, e) in kf.steps.iter().zip(&en.steps) {
        assert!((&k.analysis_mean - &e.analysis_mean).norm() < 0.1);
        assert!(operator_norm(&(&k.analysis_cov - &e.analysis_cov)).unwrap() < 0.1);
    }
}
