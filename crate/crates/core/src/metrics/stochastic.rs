use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::shape::ROUNDOFF_FLOOR;
use super::{check_lambda, MetricError, RepresentationMatrix, Result};

/// Ridge added to empirical covariances so they are strictly positive definite.
pub const DEFAULT_RIDGE: f64 = 1e-6;

const SYMMETRY_TOL: f64 = 1e-8;

/// Mean and covariance of a representation viewed as samples of a Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSummary {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
}

impl GaussianSummary {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(MetricError::ShapeMismatch(format!(
                "covariance {}x{} for mean of length {d}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(MetricError::InvalidRepresentation(
                "non-finite moment".into(),
            ));
        }
        let asym = (&covariance - covariance.transpose()).amax();
        if asym > SYMMETRY_TOL {
            return Err(MetricError::InvalidParameter(format!(
                "covariance is not symmetric (max deviation {asym:e})"
            )));
        }
        let min_eig = symmetric_eigen(&covariance)?.eigenvalues.min();
        if min_eig < -SYMMETRY_TOL {
            return Err(MetricError::InvalidParameter(format!(
                "covariance is not positive semidefinite (eigenvalue {min_eig:e})"
            )));
        }
        Ok(Self { mean, covariance })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Column means and unbiased sample covariance plus `ridge · I`.
pub fn gaussian_summary(r: &RepresentationMatrix, ridge: f64) -> Result<GaussianSummary> {
    let n = r.n_samples();
    if n < 2 {
        return Err(MetricError::InsufficientSamples(n));
    }
    let data = r.data();
    let d = r.dim();
    let mean = DVector::from_fn(d, |j, _| data.column(j).sum() / n as f64);
    let mut dev = data.clone();
    for (j, mut col) in dev.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    let mut cov = dev.tr_mul(&dev) / (n as f64 - 1.0);
    // Symmetrise exactly; the product above can differ in the last bit.
    cov = (&cov + cov.transpose()) * 0.5;
    for i in 0..d {
        cov[(i, i)] += ridge;
    }
    GaussianSummary::new(mean, cov)
}

/// Bures distance between the two covariance matrices,
/// `sqrt(tr Σ₁ + tr Σ₂ − 2 tr (Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`.
pub fn bures_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    Ok(bures_squared(a, b)?.sqrt())
}

fn bures_squared(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(MetricError::ShapeMismatch(format!(
            "dimension {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    // tr (A^{1/2} B A^{1/2})^{1/2} equals the nuclear norm of A^{1/2} B^{1/2}.
    // Taking singular values of the product avoids square-rooting tiny
    // eigenvalues of the inner matrix, which would amplify rounding error.
    let product = psd_sqrt(&a.covariance)? * psd_sqrt(&b.covariance)?;
    let fidelity: f64 = nalgebra::linalg::SVD::try_new(product, false, false, f64::EPSILON, 10_000)
        .ok_or_else(|| MetricError::NumericalFailure("SVD did not converge".into()))?
        .singular_values
        .iter()
        .sum();
    let traces = a.covariance.trace() + b.covariance.trace();
    let sq = traces - 2.0 * fidelity;
    if sq <= ROUNDOFF_FLOOR * traces.max(f64::MIN_POSITIVE) {
        Ok(0.0)
    } else {
        Ok(sq)
    }
}

/// `sqrt(λ‖μ₁ − μ₂‖² + (1 − λ) · bures²)`: λ = 0 is the Bures distance and
/// λ = 1 the Euclidean distance between means.
pub fn interpolated_distance(a: &GaussianSummary, b: &GaussianSummary, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    let bures_sq = bures_squared(a, b)?;
    let mean_sq = (&a.mean - &b.mean).norm_squared();
    Ok((lambda * mean_sq + (1.0 - lambda) * bures_sq).sqrt())
}

fn symmetric_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    SymmetricEigen::try_new(m.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| MetricError::NumericalFailure("eigendecomposition did not converge".into()))
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues from
/// rounding are clamped to zero.
pub(crate) fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = symmetric_eigen(m)?;
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}
