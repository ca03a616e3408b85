//! Representation similarity and distance metrics.
//!
//! Every metric compares the penultimate-layer representation of a reference
//! network against the representation of a candidate network evaluated on the
//! same probe batch. Deterministic shape metrics (linear CKA, Procrustes) work
//! on the raw `n × d` matrices; stochastic metrics (Bures, interpolated) work on
//! an empirical Gaussian summary of them.

mod repr;
mod shape;
mod stochastic;

pub use repr::{center_columns, RepresentationMatrix};
pub use shape::{linear_cka, procrustes_distance};
pub use stochastic::{
    bures_distance, gaussian_summary, interpolated_distance, GaussianSummary, DEFAULT_RIDGE,
};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("invalid representation: {0}")]
    InvalidRepresentation(String),
    #[error("insufficient samples: need at least 2, got {0}")]
    InsufficientSamples(usize),
    #[error("degenerate representation: {0}")]
    DegenerateRepresentation(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Whether a larger raw score means "more alike" or "further apart".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Similarity,
    Distance,
}

impl Orientation {
    /// Score that a representation obtains when compared with itself.
    pub fn perfect_score(self) -> f64 {
        match self {
            Orientation::Similarity => 1.0,
            Orientation::Distance => 0.0,
        }
    }

    /// Maps a raw score onto an ascending "distance-like" key.
    pub fn effective_distance(self, raw: f64) -> f64 {
        match self {
            Orientation::Similarity => -raw,
            Orientation::Distance => raw,
        }
    }
}

/// The concrete kernels this crate knows how to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    LinearCka,
    Procrustes,
    Bures,
    Interpolated,
}

impl MetricKind {
    pub fn orientation(self) -> Orientation {
        match self {
            MetricKind::LinearCka => Orientation::Similarity,
            _ => Orientation::Distance,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "linear_cka" | "cka" => Ok(MetricKind::LinearCka),
            "procrustes" => Ok(MetricKind::Procrustes),
            "bures" => Ok(MetricKind::Bures),
            "interpolated" => Ok(MetricKind::Interpolated),
            other => Err(MetricError::UnknownMetric(other.to_string())),
        }
    }

    pub fn canonical_name(self) -> &'static str {
        match self {
            MetricKind::LinearCka => "linear_cka",
            MetricKind::Procrustes => "procrustes",
            MetricKind::Bures => "bures",
            MetricKind::Interpolated => "interpolated",
        }
    }
}

/// A named metric together with its orientation and parameters.
///
/// `name` is the identifier used in reports and must be unique within a
/// metric set; `kind` selects the kernel. Recognised parameters are `lambda`
/// (interpolated metric, in `[0, 1]`) and `ridge` (covariance regulariser for
/// the stochastic metrics).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDescriptor {
    pub name: String,
    pub kind: MetricKind,
    pub orientation: Orientation,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl MetricDescriptor {
    pub fn new(kind: MetricKind) -> Self {
        Self {
            name: kind.canonical_name().to_string(),
            kind,
            orientation: kind.orientation(),
            params: BTreeMap::new(),
        }
    }

    pub fn linear_cka() -> Self {
        Self::new(MetricKind::LinearCka)
    }

    pub fn procrustes() -> Self {
        Self::new(MetricKind::Procrustes)
    }

    pub fn bures() -> Self {
        Self::new(MetricKind::Bures)
    }

    pub fn interpolated(lambda: f64) -> Self {
        let mut m = Self::new(MetricKind::Interpolated);
        m.params.insert("lambda".into(), lambda);
        m
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    /// Checks the orientation matches the kernel and parameters are in range.
    pub fn validate(&self) -> Result<()> {
        if self.orientation != self.kind.orientation() {
            return Err(MetricError::InvalidParameter(format!(
                "metric `{}` must have orientation {:?}",
                self.name,
                self.kind.orientation()
            )));
        }
        if let Some(&ridge) = self.params.get("ridge") {
            if !(ridge.is_finite() && ridge >= 0.0) {
                return Err(MetricError::InvalidParameter(format!("ridge = {ridge}")));
            }
        }
        if self.kind == MetricKind::Interpolated {
            check_lambda(self.lambda())?;
        }
        Ok(())
    }

    fn lambda(&self) -> f64 {
        self.params.get("lambda").copied().unwrap_or(0.5)
    }

    fn ridge(&self) -> f64 {
        self.params.get("ridge").copied().unwrap_or(DEFAULT_RIDGE)
    }
}

/// The default metric set: linear CKA, Procrustes, Bures and the interpolated
/// metric at `lambda = 0.5`.
pub fn default_metric_set() -> Vec<MetricDescriptor> {
    vec![
        MetricDescriptor::linear_cka(),
        MetricDescriptor::procrustes(),
        MetricDescriptor::bures(),
        MetricDescriptor::interpolated(0.5),
    ]
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(MetricError::InvalidParameter(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )))
    }
}

/// A raw score tagged with the orientation of the metric that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawScore {
    pub value: f64,
    pub orientation: Orientation,
}

/// Scores a candidate representation `candidate` against `reference`.
pub fn score_layer(
    metric: &MetricDescriptor,
    reference: &RepresentationMatrix,
    candidate: &RepresentationMatrix,
) -> Result<RawScore> {
    metric.validate()?;
    reference.check_comparable(candidate)?;
    let value = match metric.kind {
        MetricKind::LinearCka => linear_cka(reference, candidate)?,
        MetricKind::Procrustes => procrustes_distance(reference, candidate)?,
        MetricKind::Bures => {
            let a = gaussian_summary(reference, metric.ridge())?;
            let b = gaussian_summary(candidate, metric.ridge())?;
            bures_distance(&a, &b)?
        }
        MetricKind::Interpolated => {
            let a = gaussian_summary(reference, metric.ridge())?;
            let b = gaussian_summary(candidate, metric.ridge())?;
            interpolated_distance(&a, &b, metric.lambda())?
        }
    };
    Ok(RawScore {
        value,
        orientation: metric.orientation,
    })
}
