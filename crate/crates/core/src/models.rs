//! Gaussian priors, forward maps, covariance generators and seeded sampling.

use std::fmt;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{
    cholesky_pd, ensure_finite, ensure_finite_vec, ensure_symmetric, psd_eig, sqrt_factor, Matrix,
    Vector,
};
use crate::rng::{rng_from_seed, Rng};

/// `N(m, C)` on `R^d`.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    pub mean: Vector,
    pub cov: Matrix,
}

impl GaussianPrior {
    pub fn new(mean: Vector, cov: Matrix) -> Result<Self> {
        ensure_finite_vec(&mean, "prior mean")?;
        ensure_symmetric(&cov, "prior covariance")?;
        if mean.len() != cov.nrows() {
            return Err(Error::dims(format!(
                "prior mean has length {} but covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        psd_eig(&cov)?;
        Ok(Self { mean, cov })
    }

    pub fn centered(cov: Matrix) -> Result<Self> {
        let d = cov.nrows();
        Self::new(Vector::zeros(d), cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Evaluation contract for `u ↦ G(u)`.
pub trait ForwardMap: Send + Sync + fmt::Debug {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn evaluate(&self, u: &Vector) -> Vector;

    /// The matrix `A` when the map is linear, `G(u) = Au`.
    fn linear_matrix(&self) -> Option<&Matrix> {
        None
    }

    fn lipschitz(&self) -> Option<f64> {
        None
    }

    /// Analytic Jacobian, when the map provides one.
    fn jacobian(&self, _u: &Vector) -> Option<Matrix> {
        None
    }

    /// Applies the map to every column of a `d × N` matrix.
    fn evaluate_columns(&self, members: &Matrix) -> Matrix {
        if let Some(a) = self.linear_matrix() {
            return a * members;
        }
        let mut out = Matrix::zeros(self.output_dim(), members.ncols());
        for (j, col) in members.column_iter().enumerate() {
            let g = self.evaluate(&col.into_owned());
            out.set_column(j, &g);
        }
        out
    }
}

/// `G(u) = Au`.
#[derive(Debug, Clone)]
pub struct LinearMap {
    a: Matrix,
}

impl LinearMap {
    pub fn new(a: Matrix) -> Result<Self> {
        ensure_finite(&a, "forward matrix")?;
        if a.is_empty() {
            return Err(Error::invalid("forward matrix must be non-empty"));
        }
        Ok(Self { a })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.a
    }
}

impl ForwardMap for LinearMap {
    fn input_dim(&self) -> usize {
        self.a.ncols()
    }
    fn output_dim(&self) -> usize {
        self.a.nrows()
    }
    fn evaluate(&self, u: &Vector) -> Vector {
        &self.a * u
    }
    fn linear_matrix(&self) -> Option<&Matrix> {
        Some(&self.a)
    }
    fn lipschitz(&self) -> Option<f64> {
        crate::matrix::operator_norm(&self.a).ok()
    }
    fn jacobian(&self, _u: &Vector) -> Option<Matrix> {
        Some(self.a.clone())
    }
}

/// Nonlinear test map `G_j(u) = tanh(u_j) + 0.1 u_{(j+1) mod d}` for `j < k`.
///
/// Lipschitz with constant at most 1.1 and a Jacobian with two non-zero
/// entries per row.
#[derive(Debug, Clone, Copy)]
pub struct TanhFixture {
    d: usize,
    k: usize,
}

impl TanhFixture {
    pub const COUPLING: f64 = 0.1;

    pub fn new(d: usize, k: usize) -> Result<Self> {
        if d == 0 || k == 0 || k > d {
            return Err(Error::invalid(format!(
                "tanh fixture needs 1 <= k <= d, got d={d}, k={k}"
            )));
        }
        Ok(Self { d, k })
    }
}

impl ForwardMap for TanhFixture {
    fn input_dim(&self) -> usize {
        self.d
    }
    fn output_dim(&self) -> usize {
        self.k
    }
    fn evaluate(&self, u: &Vector) -> Vector {
        Vector::from_fn(self.k, |j, _| {
            u[j].tanh() + Self::COUPLING * u[(j + 1) % self.d]
        })
    }
    fn lipschitz(&self) -> Option<f64> {
        Some(1.0 + Self::COUPLING)
    }
    fn jacobian(&self, u: &Vector) -> Option<Matrix> {
        let mut jac = Matrix::zeros(self.k, self.d);
        for j in 0..self.k {
            let t = u[j].tanh();
            jac[(j, j)] += 1.0 - t * t;
            jac[(j, (j + 1) % self.d)] += Self::COUPLING;
        }
        Some(jac)
    }
    fn evaluate_columns(&self, members: &Matrix) -> Matrix {
        let n = members.ncols();
        let mut out = Matrix::zeros(self.k, n);
        for c in 0..n {
            let col = members.column(c);
            for j in 0..self.k {
                out[(j, c)] = col[j].tanh() + Self::COUPLING * col[(j + 1) % self.d];
            }
        }
        out
    }
}

/// Wraps a closure as a forward map.
pub struct FnMap {
    d: usize,
    k: usize,
    f: Arc<dyn Fn(&Vector) -> Vector + Send + Sync>,
}

impl FnMap {
    pub fn new(
        d: usize,
        k: usize,
        f: impl Fn(&Vector) -> Vector + Send + Sync + 'static,
    ) -> Self {
        Self {
            d,
            k,
            f: Arc::new(f),
        }
    }
}

impl fmt::Debug for FnMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnMap")
            .field("d", &self.d)
            .field("k", &self.k)
            .finish()
    }
}

impl ForwardMap for FnMap {
    fn input_dim(&self) -> usize {
        self.d
    }
    fn output_dim(&self) -> usize {
        self.k
    }
    fn evaluate(&self, u: &Vector) -> Vector {
        (self.f)(u)
    }
}

/// Covariance generators, serializable into experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovarianceSpec {
    Identity { dim: usize },
    /// Diagonal matrix with the given eigenvalues.
    DiagonalSpectrum { eigenvalues: Vec<f64> },
    /// `C_ij = variance * phi^|i-j|`.
    Ar1 { dim: usize, phi: f64, variance: f64 },
    /// Symmetric Toeplitz band: `values[b]` on the b-th off-diagonal, bandwidth `values.len() - 1`.
    Banded { dim: usize, values: Vec<f64> },
    /// Diagonal spectrum `ratio^j`, `j = 0..dim`, with `ratio` chosen so that `r2 = trace / norm` hits the target.
    GeometricSpectrum { dim: usize, r2: f64 },
    Custom { matrix: Vec<Vec<f64>> },
}

impl CovarianceSpec {
    pub fn dim(&self) -> usize {
        match self {
            CovarianceSpec::Identity { dim }
            | CovarianceSpec::Ar1 { dim, .. }
            | CovarianceSpec::Banded { dim, .. }
            | CovarianceSpec::GeometricSpectrum { dim, .. } => *dim,
            CovarianceSpec::DiagonalSpectrum { eigenvalues } => eigenvalues.len(),
            CovarianceSpec::Custom { matrix } => matrix.len(),
        }
    }
}

/// Ratio `q` in `(0, 1]` with `sum_{j<d} q^j = r2`.
pub fn geometric_ratio_for_r2(dim: usize, r2: f64) -> Result<f64> {
    if dim == 0 || !(r2 >= 1.0) || r2 > dim as f64 {
        return Err(Error::invalid(format!(
            "target r2 must lie in [1, {dim}], got {r2}"
        )));
    }
    if (r2 - dim as f64).abs() < 1e-12 {
        return Ok(1.0);
    }
    let total = |q: f64| (0..dim).map(|j| q.powi(j as i32)).sum::<f64>();
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(mid) < r2 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn make_covariance(spec: &CovarianceSpec) -> Result<Matrix> {
    let c = match spec {
        CovarianceSpec::Identity { dim } => {
            nonzero_dim(*dim)?;
            Matrix::identity(*dim, *dim)
        }
        CovarianceSpec::DiagonalSpectrum { eigenvalues } => {
            nonzero_dim(eigenvalues.len())?;
            if eigenvalues.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
                return Err(Error::invalid("spectrum entries must be finite and >= 0"));
            }
            Matrix::from_diagonal(&Vector::from_column_slice(eigenvalues))
        }
        CovarianceSpec::Ar1 { dim, phi, variance } => {
            nonzero_dim(*dim)?;
            if !(phi.abs() < 1.0) {
                return Err(Error::invalid(format!("ar1 requires |phi| < 1, got {phi}")));
            }
            if !(*variance >= 0.0) || !variance.is_finite() {
                return Err(Error::invalid("ar1 variance must be finite and >= 0"));
            }
            Matrix::from_fn(*dim, *dim, |i, j| {
                variance * phi.powi((i as i64 - j as i64).unsigned_abs() as i32)
            })
        }
        CovarianceSpec::Banded { dim, values } => {
            nonzero_dim(*dim)?;
            if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("banded spec needs finite values"));
            }
            let c = Matrix::from_fn(*dim, *dim, |i, j| {
                let lag = (i as i64 - j as i64).unsigned_abs() as usize;
                values.get(lag).copied().unwrap_or(0.0)
            });
            psd_eig(&c).map_err(|_| Error::invalid("banded covariance is not PSD"))?;
            c
        }
        CovarianceSpec::GeometricSpectrum { dim, r2 } => {
            let q = geometric_ratio_for_r2(*dim, *r2)?;
            Matrix::from_diagonal(&Vector::from_fn(*dim, |j, _| q.powi(j as i32)))
        }
        CovarianceSpec::Custom { matrix } => {
            let n = matrix.len();
            nonzero_dim(n)?;
            if matrix.iter().any(|row| row.len() != n) {
                return Err(Error::invalid("custom covariance must be square"));
            }
            let c = Matrix::from_fn(n, n, |i, j| matrix[i][j]);
            ensure_symmetric(&c, "custom covariance")?;
            psd_eig(&c).map_err(|_| Error::invalid("custom covariance is not PSD"))?;
            c
        }
    };
    Ok(c)
}

fn nonzero_dim(d: usize) -> Result<()> {
    if d == 0 {
        Err(Error::invalid("dimension must be >= 1"))
    } else {
        Ok(())
    }
}

/// `N` particles in `R^d`, stored as the columns of a `d × N` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: Matrix,
}

impl Ensemble {
    pub fn new(members: Matrix) -> Result<Self> {
        if members.ncols() < 2 {
            return Err(Error::invalid(format!(
                "ensemble needs at least 2 members, got {}",
                members.ncols()
            )));
        }
        if members.nrows() == 0 {
            return Err(Error::invalid("ensemble dimension must be >= 1"));
        }
        ensure_finite(&members, "ensemble")?;
        Ok(Self { members })
    }

    pub fn from_members(members: &[Vector]) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::invalid("ensemble needs at least 2 members, got 0"));
        };
        if members.iter().any(|m| m.len() != first.len()) {
            return Err(Error::dims("ensemble members have different lengths"));
        }
        Self::new(Matrix::from_columns(members))
    }

    pub fn dim(&self) -> usize {
        self.members.nrows()
    }

    pub fn size(&self) -> usize {
        self.members.ncols()
    }

    pub fn members(&self) -> &Matrix {
        &self.members
    }

    pub fn member(&self, n: usize) -> Vector {
        self.members.column(n).into_owned()
    }

    pub fn into_members(self) -> Matrix {
        self.members
    }
}

/// Reusable `x = m + L z` sampler.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    mean: Vector,
    factor: Matrix,
}

impl GaussianSampler {
    pub fn new(prior: &GaussianPrior) -> Result<Self> {
        // Cholesky when C is PD, eigenvalue square root otherwise.
        let factor = match cholesky_pd(&prior.cov) {
            Ok(l) => l,
            Err(_) => sqrt_factor(&prior.cov)?,
        };
        Ok(Self {
            mean: prior.mean.clone(),
            factor,
        })
    }

    /// `d × n` matrix of draws; member `j` consumes normals `j*d .. (j+1)*d`.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Matrix {
        let z = standard_normal_matrix(self.mean.len(), n, rng);
        let mut x = &self.factor * z;
        for mut col in x.column_iter_mut() {
            col += &self.mean;
        }
        x
    }
}

/// Column-major standard normal matrix.
pub fn standard_normal_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn sample_ensemble(prior: &GaussianPrior, n: usize, seed: u64) -> Result<Ensemble> {
    if n < 2 {
        return Err(Error::invalid(format!("ensemble size must be >= 2, got {n}")));
    }
    let sampler = GaussianSampler::new(prior)?;
    let mut rng = rng_from_seed(seed);
    Ensemble::new(sampler.sample(n, &mut rng))
}

/// `N` draws of `N(0, Γ)`.
pub fn sample_noise(gamma: &Matrix, n: usize, seed: u64) -> Result<Ensemble> {
    let prior = GaussianPrior::centered(gamma.clone())?;
    sample_ensemble(&prior, n, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{row_lq_norm, sample_cov, sample_mean};
    use crate::matrix::{max_norm, operator_norm};

    #[test]
    fn covariance_examples() {
        let c = make_covariance(&CovarianceSpec::Identity { dim: 3 }).unwrap();
        assert_eq!(c, Matrix::identity(3, 3));

        let c = make_covariance(&CovarianceSpec::Ar1 {
            dim: 3,
            phi: 0.5,
            variance: 1.0,
        })
        .unwrap();
        let expected =
            Matrix::from_row_slice(3, 3, &[1.0, 0.5, 0.25, 0.5, 1.0, 0.5, 0.25, 0.5, 1.0]);
        assert_eq!(c, expected);

        let c = make_covariance(&CovarianceSpec::DiagonalSpectrum {
            eigenvalues: vec![4.0, 1.0],
        })
        .unwrap();
        assert_eq!(c, Matrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = CovarianceSpec::Ar1 {
            dim: 3,
            phi: 1.0,
            variance: 1.0,
        };
        assert!(matches!(make_covariance(&bad), Err(Error::InvalidInput(_))));
        let bad = CovarianceSpec::Banded {
            dim: 4,
            values: vec![1.0, 2.0],
        };
        assert!(matches!(make_covariance(&bad), Err(Error::InvalidInput(_))));
        let bad = CovarianceSpec::DiagonalSpectrum {
            eigenvalues: vec![1.0, -1.0],
        };
        assert!(make_covariance(&bad).is_err());
    }

    #[test]
    fn geometric_spectrum_hits_target_r2() {
        for &(d, r2) in &[(50usize, 8.0), (64, 2.0), (64, 32.0)] {
            let c = make_covariance(&CovarianceSpec::GeometricSpectrum { dim: d, r2 }).unwrap();
            assert!((c.trace() / operator_norm(&c).unwrap() - r2).abs() < 1e-9);
        }
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = CovarianceSpec::Ar1 {
            dim: 10,
            phi: 0.5,
            variance: 2.0,
        };
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("\"kind\":\"ar1\""));
        assert_eq!(serde_json::from_str::<CovarianceSpec>(&text).unwrap(), spec);
    }

    #[test]
    fn ar1_rows_stay_soft_sparse() {
        let mut previous = f64::NAN;
        for &d in &[50usize, 100, 200, 400] {
            let c = make_covariance(&CovarianceSpec::Ar1 {
                dim: d,
                phi: 0.5,
                variance: 1.0,
            })
            .unwrap();
            let r = row_lq_norm(&c, 0.5).unwrap();
            // sum over lags of 0.5^(|l|/2) is bounded by 1 + 2/(sqrt2 - 1)
            assert!(r <= 1.0 + 2.0 / (2f64.sqrt() - 1.0) + 1e-12);
            // growth past d = 50 is only the geometric tail beyond lag 25
            if previous.is_finite() {
                assert!((r - previous).abs() <= 1e-3 * previous);
            }
            previous = r;
        }
    }

    #[test]
    fn degenerate_prior_gives_constant_members() {
        let m = Vector::from_vec(vec![1.0, -2.0]);
        let prior = GaussianPrior::new(m.clone(), Matrix::zeros(2, 2)).unwrap();
        let e = sample_ensemble(&prior, 5, 9).unwrap();
        for n in 0..5 {
            assert_eq!(e.member(n), m);
        }
        let z = sample_noise(&Matrix::zeros(3, 3), 4, 1).unwrap();
        assert!(z.members().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sampling_is_deterministic() {
        let prior = GaussianPrior::centered(Matrix::identity(3, 3)).unwrap();
        let a = sample_ensemble(&prior, 10, 42).unwrap();
        let b = sample_ensemble(&prior, 10, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_ensemble(&prior, 10, 43).unwrap();
        assert_ne!(a, c);
        let g = Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 1.0]));
        assert_eq!(sample_noise(&g, 6, 3).unwrap(), sample_noise(&g, 6, 3).unwrap());
    }

    #[test]
    fn too_small_ensemble_rejected() {
        let prior = GaussianPrior::centered(Matrix::identity(2, 2)).unwrap();
        assert!(sample_ensemble(&prior, 1, 0).is_err());
        let indefinite = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            GaussianPrior::centered(indefinite),
            Err(Error::NotPsd { .. })
        ));
    }

    #[test]
    fn large_sample_moments() {
        // 3 sigma of the estimators at N = 1e5: mean 3/sqrt(N) ~ 0.0095,
        // covariance entries 3*sqrt(2/N) ~ 0.013.
        let prior = GaussianPrior::centered(Matrix::identity(2, 2)).unwrap();
        let e = sample_ensemble(&prior, 100_000, 2024).unwrap();
        assert!(sample_mean(&e).amax() < 0.02);
        let c = sample_cov(&e).unwrap();
        assert!(max_norm(&(c - Matrix::identity(2, 2))).unwrap() < 0.03);

        let g = Matrix::from_element(1, 1, 2.0);
        let eta = sample_noise(&g, 100_000, 77).unwrap();
        let v = sample_cov(&eta).unwrap()[(0, 0)];
        assert!((v - 2.0).abs() < 0.05);
    }

    #[test]
    fn sample_covariance_converges_with_n() {
        let cov = make_covariance(&CovarianceSpec::Ar1 {
            dim: 5,
            phi: 0.6,
            variance: 1.0,
        })
        .unwrap();
        let prior = GaussianPrior::centered(cov.clone()).unwrap();
        let mut decreasing_pairs = 0;
        let mut total_pairs = 0;
        let mut medians = Vec::new();
        for j in 0..4 {
            let n = 10_000 * (1 << j);
            let mut errs: Vec<f64> = (0..20)
                .map(|s| {
                    let e = sample_ensemble(&prior, n, 1000 + s).unwrap();
                    operator_norm(&(sample_cov(&e).unwrap() - &cov)).unwrap()
                })
                .collect();
            errs.sort_by(f64::total_cmp);
            medians.push(0.5 * (errs[9] + errs[10]));
        }
        for w in medians.windows(2) {
            total_pairs += 1;
            if w[1] < w[0] {
                decreasing_pairs += 1;
            }
        }
        assert!(decreasing_pairs >= 3.min(total_pairs), "{medians:?}");
    }

    #[test]
    fn tanh_fixture_jacobian_matches_finite_differences() {
        let g = TanhFixture::new(4, 3).unwrap();
        let u = Vector::from_vec(vec![0.3, -0.7, 1.2, 0.1]);
        let jac = g.jacobian(&u).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            let mut up = u.clone();
            up[i] += h;
            let mut dn = u.clone();
            dn[i] -= h;
            let col = (g.evaluate(&up) - g.evaluate(&dn)) / (2.0 * h);
            for j in 0..3 {
                assert!((col[j] - jac[(j, i)]).abs() < 1e-8);
            }
        }
        let cols = g.evaluate_columns(&Matrix::from_columns(&[u.clone()]));
        assert_eq!(cols.column(0).into_owned(), g.evaluate(&u));
    }
}
