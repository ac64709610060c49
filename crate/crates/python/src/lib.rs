//! Python bindings. Matrices cross the boundary as lists of rows.
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use enkf_lab::eki::{self, EkiProblem as CoreEki};
use enkf_lab::estimators::{self, LocalizationConfig};
use enkf_lab::experiments;
use enkf_lab::models::{self, Ensemble, ForwardMap, GaussianPrior, LinearMap, TanhFixture};
use enkf_lab::operators;
use enkf_lab::oracle;
use enkf_lab::updates::{self, UpdateResult as CoreResult};
use enkf_lab::{Error, Matrix, Vector};

type Rows = Vec<Vec<f64>>;

fn to_py(e: Error) -> PyErr {
    if e.is_input_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn mat(rows: &Rows, name: &str) -> PyResult<Matrix> {
    let c = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || c == 0 || rows.iter().any(|r| r.len() != c) {
        return Err(PyValueError::new_err(format!(
            "{name}: expected a non-empty list of equal-length rows"
        )));
    }
    Ok(Matrix::from_fn(rows.len(), c, |i, j| rows[i][j]))
}

fn rows(m: &Matrix) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn vec_of(v: &Vector) -> Vec<f64> {
    v.iter().copied().collect()
}

/// Linear-Gaussian observation model `y = A u + η`, `η ~ N(0, Γ)`.
#[pyclass(frozen)]
struct LinearProblem {
    inner: operators::LinearProblem,
}

#[pymethods]
impl LinearProblem {
    #[new]
    fn new(a: Rows, gamma: Rows, y: Vec<f64>) -> PyResult<Self> {
        let inner = operators::LinearProblem::new(mat(&a, "a")?, mat(&gamma, "gamma")?, Vector::from_vec(y))
            .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.inner.obs_dim()
    }

    /// Kalman gain `CAᵀ(ACAᵀ + Γ)⁻¹`.
    fn gain(&self, c: Rows) -> PyResult<Rows> {
        Ok(rows(&self.inner.gain(&mat(&c, "c")?).map_err(to_py)?))
    }

    /// Posterior `(mean, cov)` from prior moments.
    fn posterior(&self, m: Vec<f64>, c: Rows) -> PyResult<(Vec<f64>, Rows)> {
        let c = mat(&c, "c")?;
        let m = Vector::from_vec(m);
        let mu = operators::mean_update(&m, &c, &self.inner).map_err(to_py)?;
        let sigma = operators::cov_update(&c, &self.inner.a, &self.inner.gamma).map_err(to_py)?;
        Ok((vec_of(&mu), rows(&sigma)))
    }

    /// The same posterior through the explicit-inverse reference.
    fn exact_posterior(&self, m: Vec<f64>, c: Rows) -> PyResult<(Vec<f64>, Rows)> {
        let (mu, sigma) =
            oracle::exact_posterior(&Vector::from_vec(m), &mat(&c, "c")?, &self.inner).map_err(to_py)?;
        Ok((vec_of(&mu), rows(&sigma)))
    }
}

/// Outcome of one ensemble update.
#[pyclass(frozen, get_all)]
struct UpdateResult {
    /// Updated members, one row per member.
    members: Rows,
    mu_hat: Vec<f64>,
    sigma_hat: Rows,
    gain: Rows,
    offset_norm: Option<f64>,
    radius_used: Option<f64>,
    mean_drift: Option<f64>,
}

impl From<CoreResult> for UpdateResult {
    fn from(r: CoreResult) -> Self {
        Self {
            members: rows(&r.ensemble.members().transpose()),
            mu_hat: vec_of(&r.mu_hat),
            sigma_hat: rows(&r.sigma_hat),
            gain: rows(&r.diagnostics.gain),
            offset_norm: r.diagnostics.offset_norm,
            radius_used: r.diagnostics.radius_used,
            mean_drift: r.diagnostics.mean_drift,
        }
    }
}

fn ensemble(members: &Rows) -> PyResult<Ensemble> {
    Ensemble::new(mat(members, "members")?.transpose()).map_err(to_py)
}

fn localization(radius: Option<f64>, t: f64, c: f64) -> LocalizationConfig {
    match radius {
        Some(radius) => LocalizationConfig::Explicit { radius },
        None => LocalizationConfig::Derived { t, c },
    }
}

/// `n` draws from `N(mean, cov)`, one row per member.
#[pyfunction]
fn sample_ensemble(mean: Vec<f64>, cov: Rows, n: usize, seed: u64) -> PyResult<Rows> {
    let prior = GaussianPrior::new(Vector::from_vec(mean), mat(&cov, "cov")?).map_err(to_py)?;
    let e = models::sample_ensemble(&prior, n, seed).map_err(to_py)?;
    Ok(rows(&e.members().transpose()))
}

#[pyfunction]
fn po_update(members: Rows, problem: &LinearProblem, seed: u64) -> PyResult<UpdateResult> {
    Ok(updates::po_update(&ensemble(&members)?, &problem.inner, seed).map_err(to_py)?.into())
}

#[pyfunction]
fn etkf_update(members: Rows, problem: &LinearProblem) -> PyResult<UpdateResult> {
    Ok(updates::etkf_update(&ensemble(&members)?, &problem.inner, None).map_err(to_py)?.into())
}

#[pyfunction]
fn eakf_update(members: Rows, problem: &LinearProblem) -> PyResult<UpdateResult> {
    Ok(updates::eakf_update(&ensemble(&members)?, &problem.inner).map_err(to_py)?.into())
}

/// PO update with a thresholded, positive-part covariance. Without
/// `radius`, the radius follows the rate `c * C_(1) * max(...)`.
#[pyfunction]
#[pyo3(signature = (members, problem, seed, radius=None, t=1.0, c=1.0))]
fn localized_po_update(
    members: Rows,
    problem: &LinearProblem,
    seed: u64,
    radius: Option<f64>,
    t: f64,
    c: f64,
) -> PyResult<UpdateResult> {
    let loc = localization(radius, t, c);
    Ok(updates::localized_po_update(&ensemble(&members)?, &problem.inner, &loc, seed)
        .map_err(to_py)?
        .into())
}

#[pyfunction]
#[pyo3(signature = (members, problem, radius=None, t=1.0, c=1.0))]
fn localized_sr_update(
    members: Rows,
    problem: &LinearProblem,
    radius: Option<f64>,
    t: f64,
    c: f64,
) -> PyResult<UpdateResult> {
    let loc = localization(radius, t, c);
    Ok(updates::localized_sr_update(&ensemble(&members)?, &problem.inner, &loc)
        .map_err(to_py)?
        .into())
}

/// Data-misfit problem for ensemble Kalman inversion.
#[pyclass(frozen)]
struct EkiProblem {
    inner: CoreEki,
}

#[pymethods]
impl EkiProblem {
    /// `G(u) = A u`.
    #[staticmethod]
    fn linear(a: Rows, gamma: Rows, y: Vec<f64>) -> PyResult<Self> {
        let map: Arc<dyn ForwardMap> = Arc::new(LinearMap::new(mat(&a, "a")?).map_err(to_py)?);
        Self::build(map, gamma, y)
    }

    /// `G_j(u) = tanh(u_j) + 0.1 u_{j+1}`, `j < k`.
    #[staticmethod]
    fn tanh(d: usize, k: usize, gamma: Rows, y: Vec<f64>) -> PyResult<Self> {
        let map: Arc<dyn ForwardMap> = Arc::new(TanhFixture::new(d, k).map_err(to_py)?);
        Self::build(map, gamma, y)
    }

    fn forward(&self, u: Vec<f64>) -> Vec<f64> {
        vec_of(&self.inner.forward.evaluate(&Vector::from_vec(u)))
    }

    fn data_misfit(&self, u: Vec<f64>) -> PyResult<f64> {
        eki::data_misfit(&Vector::from_vec(u), &self.inner).map_err(to_py)
    }
}

impl EkiProblem {
    fn build(map: Arc<dyn ForwardMap>, gamma: Rows, y: Vec<f64>) -> PyResult<Self> {
        let inner = CoreEki::new(map, mat(&gamma, "gamma")?, Vector::from_vec(y)).map_err(to_py)?;
        Ok(Self { inner })
    }
}

#[pyfunction]
fn eki_update(members: Rows, problem: &EkiProblem, seed: u64) -> PyResult<UpdateResult> {
    Ok(eki::eki_update(&ensemble(&members)?, &problem.inner, seed).map_err(to_py)?.into())
}

#[pyfunction]
fn leki_update(members: Rows, problem: &EkiProblem, rho_up: f64, rho_pp: f64, seed: u64) -> PyResult<UpdateResult> {
    Ok(eki::leki_update(&ensemble(&members)?, &problem.inner, rho_up, rho_pp, seed)
        .map_err(to_py)?
        .into())
}

/// `r2`, `r_inf`, trace, operator norm and largest diagonal entry.
#[pyfunction]
fn effective_dims<'py>(py: Python<'py>, s: Rows) -> PyResult<Bound<'py, PyDict>> {
    let d = estimators::effective_dims(&mat(&s, "s")?).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("r2", d.r2)?;
    out.set_item("r_inf", d.r_inf)?;
    out.set_item("trace", d.trace)?;
    out.set_item("op_norm", d.op_norm)?;
    out.set_item("max_diag", d.max_diag)?;
    Ok(out)
}

#[pyfunction]
fn threshold(b: Rows, rho: f64) -> PyResult<Rows> {
    Ok(rows(&estimators::threshold(&mat(&b, "b")?, rho).map_err(to_py)?))
}

#[pyfunction]
fn positive_part(s: Rows) -> PyResult<Rows> {
    Ok(rows(&estimators::positive_part(&mat(&s, "s")?).map_err(to_py)?))
}

/// Records of a shipped preset, one dict per row of the records CSV.
#[pyfunction]
#[pyo3(signature = (name, master_seed=None))]
fn run_preset<'py>(py: Python<'py>, name: &str, master_seed: Option<u64>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut spec = experiments::preset(name).map_err(to_py)?;
    if let Some(s) = master_seed {
        spec.master_seed = s;
    }
    let records = py.detach(|| experiments::run_experiment(&spec)).map_err(to_py)?;
    records
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("experiment", &r.experiment)?;
            d.set_item("N", r.n)?;
            d.set_item("seed", r.seed)?;
            d.set_item("method", &r.method)?;
            d.set_item("error_mean", r.error_mean)?;
            d.set_item("error_cov", r.error_cov)?;
            d.set_item("offset_norm", r.offset_norm)?;
            d.set_item("radius", r.radius)?;
            d.set_item("r2", r.r2)?;
            d.set_item("r_inf", r.r_inf)?;
            Ok(d)
        })
        .collect()
}

/// Least-squares slope of `ln error` against `ln N`.
#[pyfunction]
fn fit_rate(points: Vec<(f64, f64)>) -> PyResult<(f64, f64)> {
    let f = experiments::fit_rate(&points).map_err(to_py)?;
    Ok((f.slope, f.intercept))
}

#[pyfunction]
fn preset_names() -> Vec<&'static str> {
    experiments::preset_names()
}

/// Ensemble Kalman updates, inversion and Monte Carlo rate experiments.
#[pymodule]
#[pyo3(name = "enkf_lab")]
fn enkf_lab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<LinearProblem>()?;
    m.add_class::<UpdateResult>()?;
    m.add_class::<EkiProblem>()?;
    m.add_function(wrap_pyfunction!(sample_ensemble, m)?)?;
    m.add_function(wrap_pyfunction!(po_update, m)?)?;
    m.add_function(wrap_pyfunction!(etkf_update, m)?)?;
    m.add_function(wrap_pyfunction!(eakf_update, m)?)?;
    m.add_function(wrap_pyfunction!(localized_po_update, m)?)?;
    m.add_function(wrap_pyfunction!(localized_sr_update, m)?)?;
    m.add_function(wrap_pyfunction!(eki_update, m)?)?;
    m.add_function(wrap_pyfunction!(leki_update, m)?)?;
    m.add_function(wrap_pyfunction!(effective_dims, m)?)?;
    m.add_function(wrap_pyfunction!(threshold, m)?)?;
    m.add_function(wrap_pyfunction!(positive_part, m)?)?;
    m.add_function(wrap_pyfunction!(run_preset, m)?)?;
    m.add_function(wrap_pyfunction!(fit_rate, m)?)?;
    m.add_function(wrap_pyfunction!(preset_names, m)?)?;
    Ok(())
}
