//! Dense matrix primitives shared by every other module.
//!
//! Matrices are plain `nalgebra` dynamic matrices; the functions here add the
//! validation (finiteness, symmetry, semi-definiteness) and the handful of
//! factorizations the ensemble updates need.

use nalgebra::{DMatrix, DVector, SVD};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative tolerance for the symmetry check.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Relative tolerance below zero accepted for eigenvalues of a PSD matrix.
pub const PSD_TOL: f64 = 1e-8;

/// Eigen-decomposition of a symmetric matrix, eigenvalues sorted descending.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    pub eigenvalues: Vector,
    /// Orthonormal eigenvectors stored as columns, in the order of `eigenvalues`.
    pub eigenvectors: Matrix,
}

impl SpectralDecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `V f(Λ) Vᵀ` for a scalar function applied to the spectrum.
    pub fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let mut scaled = self.eigenvectors.clone();
        for (j, &lambda) in self.eigenvalues.iter().enumerate() {
            let w = f(lambda);
            scaled.column_mut(j).scale_mut(w);
        }
        let mut out = &scaled * self.eigenvectors.transpose();
        symmetrize_in_place(&mut out);
        out
    }

    pub fn reconstruct(&self) -> Matrix {
        self.map_spectrum(|l| l)
    }
}

pub fn ensure_finite(m: &Matrix, name: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} has non-finite entries")))
    }
}

pub fn ensure_finite_vec(v: &Vector, name: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} has non-finite entries")))
    }
}

pub fn ensure_square(m: &Matrix, name: &str) -> Result<()> {
    if m.nrows() == m.ncols() && m.nrows() > 0 {
        Ok(())
    } else {
        Err(Error::dims(format!(
            "{name} must be square and non-empty, got {}x{}",
            m.nrows(),
            m.ncols()
        )))
    }
}

/// Checks `max |S_ij - S_ji| <= 1e-10 (1 + max |S_ij|)` and finiteness.
pub fn ensure_symmetric(s: &Matrix, name: &str) -> Result<()> {
    ensure_square(s, name)?;
    ensure_finite(s, name)?;
    let scale = 1.0 + max_abs(s);
    let n = s.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            if (s[(i, j)] - s[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::invalid(format!(
                    "{name} is not symmetric at ({i},{j})"
                )));
            }
        }
    }
    Ok(())
}

fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn symmetrize_in_place(m: &mut Matrix) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// `(S + Sᵀ) / 2`.
pub fn symmetrize(m: Matrix) -> Matrix {
    let mut m = m;
    symmetrize_in_place(&mut m);
    m
}

/// Largest singular value.
pub fn operator_norm(m: &Matrix) -> Result<f64> {
    ensure_finite(m, "matrix")?;
    if m.is_empty() {
        return Ok(0.0);
    }
    if m.nrows() == m.ncols() && is_exactly_symmetric(m) {
        let eigs = m.clone().symmetric_eigenvalues();
        return Ok(eigs.iter().fold(0.0_f64, |acc, v| acc.max(v.abs())));
    }
    let sv = m.clone().singular_values();
    Ok(sv.iter().fold(0.0_f64, |acc, v| acc.max(*v)))
}

fn is_exactly_symmetric(m: &Matrix) -> bool {
    let n = m.nrows();
    (0..n).all(|j| ((j + 1)..n).all(|i| m[(i, j)] == m[(j, i)]))
}

/// `max_ij |M_ij|`.
pub fn max_norm(m: &Matrix) -> Result<f64> {
    ensure_finite(m, "matrix")?;
    Ok(max_abs(m))
}

/// Maximum absolute row sum.
pub fn linf_induced_norm(m: &Matrix) -> Result<f64> {
    ensure_finite(m, "matrix")?;
    Ok(m.row_iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0_f64, f64::max))
}

pub fn sym_eig(s: &Matrix) -> Result<SpectralDecomposition> {
    ensure_symmetric(s, "matrix")?;
    let eig = s
        .clone()
        .try_symmetric_eigen(f64::EPSILON, 0)
        .ok_or_else(|| Error::Numeric("symmetric eigen-solver did not converge".into()))?;
    let n = s.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues = Vector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut eigenvectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SpectralDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

/// Spectrum of a PSD matrix with round-off negatives clamped to zero.
///
/// Fails with [`Error::NotPsd`] when the smallest eigenvalue is below
/// `-1e-8 * max(1, largest eigenvalue)`.
pub fn psd_eig(s: &Matrix) -> Result<SpectralDecomposition> {
    let mut eig = sym_eig(s)?;
    let n = eig.dim();
    let top = eig.eigenvalues[0];
    let bottom = eig.eigenvalues[n - 1];
    let tol = PSD_TOL * top.max(1.0);
    if bottom < -tol {
        return Err(Error::NotPsd {
            min_eigenvalue: bottom,
            tolerance: tol,
        });
    }
    eig.eigenvalues.iter_mut().for_each(|l| *l = l.max(0.0));
    Ok(eig)
}

/// A factor `X` (d×d) with `X Xᵀ = S`, built as `V Λ^{1/2}`.
pub fn sqrt_factor(s: &Matrix) -> Result<Matrix> {
    let eig = psd_eig(s)?;
    let mut x = eig.eigenvectors;
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        x.column_mut(j).scale_mut(l.sqrt());
    }
    Ok(x)
}

/// The symmetric PSD square root `V Λ^{1/2} Vᵀ`.
pub fn sym_sqrt(s: &Matrix) -> Result<Matrix> {
    Ok(psd_eig(s)?.map_spectrum(f64::sqrt))
}

/// Default pseudo-inverse cut-off: `eps * max(rows, cols) * sigma_max`.
pub fn default_pinv_tol(m: &Matrix) -> f64 {
    let sigma_max = m
        .clone()
        .singular_values()
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(*v));
    f64::EPSILON * m.nrows().max(m.ncols()) as f64 * sigma_max
}

/// Moore–Penrose pseudo-inverse; singular values `<= tol` are treated as zero.
pub fn pseudo_inverse(m: &Matrix, tol: Option<f64>) -> Result<Matrix> {
    ensure_finite(m, "matrix")?;
    if let Some(t) = tol {
        if !(t >= 0.0) {
            return Err(Error::invalid("pseudo-inverse tolerance must be >= 0"));
        }
    }
    let svd = SVD::try_new(m.clone(), true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numeric("SVD did not converge".into()))?;
    let sigma_max = svd.singular_values.iter().fold(0.0_f64, |a, v| a.max(*v));
    let tol = tol.unwrap_or(f64::EPSILON * m.nrows().max(m.ncols()) as f64 * sigma_max);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    // M⁺ = V Σ⁺ Uᵀ
    let mut v_scaled = v_t.transpose();
    for (j, &s) in svd.singular_values.iter().enumerate() {
        let w = if s > tol && s > 0.0 { 1.0 / s } else { 0.0 };
        v_scaled.column_mut(j).scale_mut(w);
    }
    Ok(v_scaled * u.transpose())
}

/// Lower-triangular Cholesky factor; fails on a non-positive pivot.
pub fn cholesky_pd(s: &Matrix) -> Result<Matrix> {
    ensure_symmetric(s, "matrix")?;
    nalgebra::Cholesky::new(s.clone())
        .map(|c| c.unpack())
        .ok_or_else(|| Error::NotPositiveDefinite("non-positive pivot in Cholesky".into()))
}

/// Numerical rank: eigenvalues above `1e-8 * lambda_max`.
pub fn psd_rank(s: &Matrix) -> Result<usize> {
    let eig = sym_eig(s)?;
    let top = eig.eigenvalues[0].max(0.0);
    Ok(eig.eigenvalues.iter().filter(|&&l| l > 1e-8 * top).count())
}
