use nalgebra::DMatrix;

use super::repr::centered;
use super::{MetricError, RepresentationMatrix, Result};

/// Squared distances below this fraction of the combined squared norms are
/// indistinguishable from rounding error and are reported as zero.
pub(crate) const ROUNDOFF_FLOOR: f64 = 1e-12;

/// Linear centered kernel alignment, `‖Yᵀ X‖²_F / (‖Xᵀ X‖_F ‖Yᵀ Y‖_F)` on
/// column-centered inputs.
pub fn linear_cka(a: &RepresentationMatrix, b: &RepresentationMatrix) -> Result<f64> {
    a.check_comparable(b)?;
    let x = centered(a.data());
    let y = centered(b.data());
    let xx = x.tr_mul(&x).norm();
    let yy = y.tr_mul(&y).norm();
    if xx == 0.0 || yy == 0.0 {
        return Err(MetricError::DegenerateRepresentation(
            "all rows are equal".into(),
        ));
    }
    let cross = y.tr_mul(&x).norm_squared();
    Ok((cross / (xx * yy)).clamp(0.0, 1.0))
}

/// Orthogonal Procrustes distance between column-centered, unit-Frobenius-norm
/// versions of the two representations. Lies in `[0, 2]`.
pub fn procrustes_distance(a: &RepresentationMatrix, b: &RepresentationMatrix) -> Result<f64> {
    a.check_same_dim(b)?;
    let x = unit_frobenius(centered(a.data()))?;
    let y = unit_frobenius(centered(b.data()))?;
    let nuclear = nuclear_norm(&y.tr_mul(&x))?;
    let sq = 2.0 - 2.0 * nuclear;
    if sq <= 2.0 * ROUNDOFF_FLOOR {
        return Ok(0.0);
    }
    Ok(sq.sqrt().min(2.0))
}

fn unit_frobenius(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let norm = m.norm();
    if norm == 0.0 {
        return Err(MetricError::DegenerateRepresentation(
            "zero matrix after centering".into(),
        ));
    }
    Ok(m / norm)
}

fn nuclear_norm(m: &DMatrix<f64>) -> Result<f64> {
    let svd = nalgebra::linalg::SVD::try_new(m.clone(), false, false, f64::EPSILON, 10_000)
        .ok_or_else(|| MetricError::NumericalFailure("SVD did not converge".into()))?;
    Ok(svd.singular_values.iter().sum())
}
