//! Rank-consensus block selection.
//!
//! Every metric ranks the eligible blocks by how closely the network without
//! that block reproduces the reference representation (rank 1 = most alike).
//! Ranks are summed across metrics and the block with the smallest total is
//! the victim. Ties, both within a metric and between totals, go to the
//! smaller [`LayerRef`].

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

use crate::metrics::{score_layer, MetricDescriptor, MetricError, Orientation, RepresentationMatrix};
use crate::net::{extract_representation, LayerRef, Model, ModelCheckpoint};
use crate::surgery::remove_block;

#[derive(Debug, Error)]
pub enum ConsensusError {
    #[error("layer {0} appears twice in one metric's scores")]
    DuplicateLayer(LayerRef),
    #[error("score rows mix metrics `{0}` and `{1}`")]
    MixedMetrics(String, String),
    #[error("no scores to rank")]
    EmptyScores,
    #[error("non-finite score {value} for {layer} under `{metric}`")]
    NonFiniteScore { metric: String, layer: LayerRef, value: f64 },
    #[error("rank tables disagree: {0}")]
    InconsistentTables(String),
    #[error("no eligible layers")]
    NoEligibleLayers,
    #[error("metric set is invalid: {0}")]
    InvalidMetricSet(String),
    #[error("scoring {layer} with `{metric}` failed: {source}")]
    Metric {
        metric: String,
        layer: LayerRef,
        source: MetricError,
    },
    #[error("reference representation failed: {0}")]
    Reference(String),
    #[error("candidate without {layer} failed: {message}")]
    Candidate { layer: LayerRef, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub layer_id: LayerRef,
    pub metric_name: String,
    pub raw_score: f64,
    pub orientation: Orientation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankTable {
    pub metric_name: String,
    pub ranks: BTreeMap<LayerRef, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusScore {
    pub totals: BTreeMap<LayerRef, usize>,
}

/// Ranks one metric's scores: ascending effective distance, rank 1 for the
/// most similar layer.
pub fn scores_to_ranks(rows: &[ScoreRow]) -> Result<RankTable, ConsensusError> {
    let first = rows.first().ok_or(ConsensusError::EmptyScores)?;
    let mut seen = BTreeSet::new();
    for r in rows {
        if r.metric_name != first.metric_name {
            return Err(ConsensusError::MixedMetrics(first.metric_name.clone(), r.metric_name.clone()));
        }
        if !r.raw_score.is_finite() {
            return Err(ConsensusError::NonFiniteScore {
                metric: r.metric_name.clone(),
                layer: r.layer_id,
                value: r.raw_score,
            });
        }
        if !seen.insert(r.layer_id) {
            return Err(ConsensusError::DuplicateLayer(r.layer_id));
        }
    }
    let mut order: Vec<(f64, LayerRef)> = rows
        .iter()
        .map(|r| (r.orientation.effective_distance(r.raw_score), r.layer_id))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let ranks = order.iter().enumerate().map(|(i, &(_, l))| (l, i + 1)).collect();
    Ok(RankTable {
        metric_name: first.metric_name.clone(),
        ranks,
    })
}

/// Sums ranks per layer across metrics. All tables must cover the same layers.
pub fn aggregate_ranks(tables: &[RankTable]) -> Result<ConsensusScore, ConsensusError> {
    let first = tables
        .first()
        .ok_or_else(|| ConsensusError::InconsistentTables("no tables".into()))?;
    let mut totals: BTreeMap<LayerRef, usize> = first.ranks.keys().map(|&l| (l, 0)).collect();
    for t in tables {
        if t.ranks.len() != totals.len() || t.ranks.keys().any(|l| !totals.contains_key(l)) {
            return Err(ConsensusError::InconsistentTables(format!(
                "`{}` ranks a different layer set than `{}`",
                t.metric_name, first.metric_name
            )));
        }
        for (l, r) in &t.ranks {
            *totals.get_mut(l).expect("checked above") += r;
        }
    }
    Ok(ConsensusScore { totals })
}

/// The layer with the smallest rank total; the smaller layer wins ties.
pub fn select_victim(score: &ConsensusScore) -> Result<LayerRef, ConsensusError> {
    // BTreeMap iterates in layer order, so the first minimum is the tie winner.
    score
        .totals
        .iter()
        .fold(None, |best: Option<(LayerRef, usize)>, (&l, &t)| match best {
            Some((_, bt)) if bt <= t => best,
            _ => Some((l, t)),
        })
        .map(|(l, _)| l)
        .ok_or(ConsensusError::NoEligibleLayers)
}

/// Supplies `M(F, X)` for the current network and for each candidate with
/// one block removed. Every call must use the same probe batch.
pub trait RepresentationSource {
    fn reference(&mut self) -> Result<RepresentationMatrix, ConsensusError>;
    fn candidate(&mut self, layer: LayerRef) -> Result<RepresentationMatrix, ConsensusError>;
}

/// Representations computed from a checkpoint: candidates are built with
/// [`remove_block`] and evaluated without any fine-tuning.
pub struct CheckpointSource<'a> {
    ckpt: &'a ModelCheckpoint,
    probes: &'a Array2<f32>,
}

impl<'a> CheckpointSource<'a> {
    pub fn new(ckpt: &'a ModelCheckpoint, probes: &'a Array2<f32>) -> Self {
        Self { ckpt, probes }
    }
}

impl RepresentationSource for CheckpointSource<'_> {
    fn reference(&mut self) -> Result<RepresentationMatrix, ConsensusError> {
        let mut model = Model::<f32>::from_checkpoint(self.ckpt).map_err(|e| ConsensusError::Reference(e.to_string()))?;
        extract_representation(&mut model, self.probes.view()).map_err(|e| ConsensusError::Reference(e.to_string()))
    }

    fn candidate(&mut self, layer: LayerRef) -> Result<RepresentationMatrix, ConsensusError> {
        let fail = |message: String| ConsensusError::Candidate { layer, message };
        let pruned = remove_block(self.ckpt, layer).map_err(|e| fail(e.to_string()))?;
        let mut model = Model::<f32>::from_checkpoint(&pruned).map_err(|e| fail(e.to_string()))?;
        extract_representation(&mut model, self.probes.view()).map_err(|e| fail(e.to_string()))
    }
}

/// Everything one selection step computed.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationOutcome {
    pub victim: LayerRef,
    pub eligible: Vec<LayerRef>,
    pub scores: Vec<ScoreRow>,
    pub tables: Vec<RankTable>,
    pub consensus: ConsensusScore,
}

/// Serialised audit trail of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub iteration: usize,
    pub eligible_layers: Vec<LayerRef>,
    pub raw_scores: BTreeMap<String, BTreeMap<LayerRef, f64>>,
    pub ranks: BTreeMap<String, BTreeMap<LayerRef, usize>>,
    pub totals: BTreeMap<LayerRef, usize>,
    pub victim: LayerRef,
}

impl IterationOutcome {
    pub fn audit(&self, iteration: usize) -> AuditRecord {
        let mut raw_scores: BTreeMap<String, BTreeMap<LayerRef, f64>> = BTreeMap::new();
        for r in &self.scores {
            raw_scores.entry(r.metric_name.clone()).or_default().insert(r.layer_id, r.raw_score);
        }
        AuditRecord {
            iteration,
            eligible_layers: self.eligible.clone(),
            raw_scores,
            ranks: self.tables.iter().map(|t| (t.metric_name.clone(), t.ranks.clone())).collect(),
            totals: self.consensus.totals.clone(),
            victim: self.victim,
        }
    }
}

pub fn validate_metric_set(metrics: &[MetricDescriptor]) -> Result<(), ConsensusError> {
    if metrics.is_empty() {
        return Err(ConsensusError::InvalidMetricSet("empty".into()));
    }
    let mut names = BTreeSet::new();
    for m in metrics {
        m.validate().map_err(|e| ConsensusError::InvalidMetricSet(format!("{}: {e}", m.name)))?;
        if !names.insert(m.name.as_str()) {
            return Err(ConsensusError::InvalidMetricSet(format!("duplicate metric name `{}`", m.name)));
        }
    }
    Ok(())
}

/// One selection step: score every candidate against the reference under
/// every metric, rank, aggregate and pick the victim. The network itself is
/// left untouched.
pub fn prune_iteration(
    source: &mut dyn RepresentationSource,
    eligible: &[LayerRef],
    metrics: &[MetricDescriptor],
) -> Result<IterationOutcome, ConsensusError> {
    if eligible.is_empty() {
        return Err(ConsensusError::NoEligibleLayers);
    }
    validate_metric_set(metrics)?;
    let mut layers = eligible.to_vec();
    layers.sort();
    if let Some(w) = layers.windows(2).find(|w| w[0] == w[1]) {
        return Err(ConsensusError::DuplicateLayer(w[0]));
    }
    let reference = source.reference()?;
    // Each candidate representation is extracted once and scored by every metric.
    let mut per_metric: Vec<Vec<ScoreRow>> = vec![Vec::with_capacity(layers.len()); metrics.len()];
    for &layer in &layers {
        let cand = source.candidate(layer)?;
        for (m, rows) in metrics.iter().zip(per_metric.iter_mut()) {
            let score = score_layer(m, &reference, &cand).map_err(|source| ConsensusError::Metric {
                metric: m.name.clone(),
                layer,
                source,
            })?;
            rows.push(ScoreRow {
                layer_id: layer,
                metric_name: m.name.clone(),
                raw_score: score.value,
                orientation: score.orientation,
            });
        }
    }
    let tables = per_metric
        .iter()
        .map(|rows| scores_to_ranks(rows))
        .collect::<Result<Vec<_>, _>>()?;
    let consensus = aggregate_ranks(&tables)?;
    let victim = select_victim(&consensus)?;
    Ok(IterationOutcome {
        victim,
        eligible: layers,
        scores: per_metric.into_iter().flatten().collect(),
        tables,
        consensus,
    })
}
