use nalgebra::DMatrix;

use super::{MetricError, Result};

/// An `n × d` matrix of penultimate-layer features, one row per probe sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationMatrix {
    data: DMatrix<f64>,
    sample_ids: Vec<u64>,
}

impl RepresentationMatrix {
    pub fn new(data: DMatrix<f64>, sample_ids: Vec<u64>) -> Result<Self> {
        if data.nrows() < 2 {
            return Err(MetricError::InsufficientSamples(data.nrows()));
        }
        if data.ncols() < 1 {
            return Err(MetricError::InvalidRepresentation(
                "feature dimension must be at least 1".into(),
            ));
        }
        if sample_ids.len() != data.nrows() {
            return Err(MetricError::InvalidRepresentation(format!(
                "{} sample ids for {} rows",
                sample_ids.len(),
                data.nrows()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MetricError::InvalidRepresentation(
                "non-finite entry".into(),
            ));
        }
        Ok(Self { data, sample_ids })
    }

    /// Wraps a matrix whose rows are identified by their position.
    pub fn from_matrix(data: DMatrix<f64>) -> Result<Self> {
        let ids = (0..data.nrows() as u64).collect();
        Self::new(data, ids)
    }

    /// Builds a representation from a row-major buffer of `n * d` values.
    pub fn from_row_slice(n: usize, d: usize, values: &[f64], sample_ids: Vec<u64>) -> Result<Self> {
        if values.len() != n * d {
            return Err(MetricError::InvalidRepresentation(format!(
                "expected {} values, got {}",
                n * d,
                values.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(n, d, values), sample_ids)
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn sample_ids(&self) -> &[u64] {
        &self.sample_ids
    }

    pub fn n_samples(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Two representations may be compared when they describe the same probe
    /// samples in the same order.
    pub fn check_comparable(&self, other: &Self) -> Result<()> {
        if self.n_samples() != other.n_samples() {
            return Err(MetricError::ShapeMismatch(format!(
                "{} vs {} samples",
                self.n_samples(),
                other.n_samples()
            )));
        }
        if self.sample_ids != other.sample_ids {
            return Err(MetricError::ShapeMismatch(
                "sample ordering differs".into(),
            ));
        }
        Ok(())
    }

    pub(crate) fn check_same_dim(&self, other: &Self) -> Result<()> {
        self.check_comparable(other)?;
        if self.dim() != other.dim() {
            return Err(MetricError::ShapeMismatch(format!(
                "feature dimension {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(())
    }

    /// Reorders rows (and their ids) so that row `i` of the result is row
    /// `order[i]` of `self`.
    pub fn permute_rows(&self, order: &[usize]) -> Self {
        let data = DMatrix::from_fn(order.len(), self.dim(), |i, j| self.data[(order[i], j)]);
        let ids = order.iter().map(|&i| self.sample_ids[i]).collect();
        Self {
            data,
            sample_ids: ids,
        }
    }

    pub fn permute_columns(&self, order: &[usize]) -> Self {
        let data = DMatrix::from_fn(self.n_samples(), order.len(), |i, j| self.data[(i, order[j])]);
        Self {
            data,
            sample_ids: self.sample_ids.clone(),
        }
    }

    /// Right-multiplies the features by `q`.
    pub fn transform(&self, q: &DMatrix<f64>) -> Result<Self> {
        if q.nrows() != self.dim() {
            return Err(MetricError::ShapeMismatch(format!(
                "transform has {} rows for {} features",
                q.nrows(),
                self.dim()
            )));
        }
        Self::new(&self.data * q, self.sample_ids.clone())
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(&self.data * c, self.sample_ids.clone())
    }
}

/// Subtracts each column's mean.
pub fn center_columns(r: &RepresentationMatrix) -> Result<RepresentationMatrix> {
    if r.data.iter().any(|v| !v.is_finite()) {
        return Err(MetricError::InvalidRepresentation(
            "non-finite entry".into(),
        ));
    }
    Ok(RepresentationMatrix {
        data: centered(&r.data),
        sample_ids: r.sample_ids.clone(),
    })
}

pub(crate) fn centered(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows() as f64;
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
    out
}
