//! Physical block removal with weight transfer.
//!
//! Removing block `i` of a residual stack turns `y_i = f_i(y_{i-1}) + y_{i-1}`
//! into `y_i = y_{i-1}`: the new architecture simply omits the block and every
//! surviving tensor is carried over unchanged. [`zero_branch_oracle`] computes
//! the same function on the original architecture by silencing `f_i`, which is
//! what the surgery tests compare against.

use ndarray::{Array2, ArrayView2};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::net::{ArchitectureSpec, BlockKind, LayerRef, Model, ModelCheckpoint, NetError};

#[derive(Debug, Error)]
pub enum SurgeryError {
    #[error("{layer} cannot be removed: {reason}")]
    IneligibleLayer { layer: LayerRef, reason: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("zero-branch oracle undefined for {0}: block has no identity shortcut")]
    OracleUndefined(LayerRef),
    #[error(transparent)]
    Net(NetError),
}

impl From<NetError> for SurgeryError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::CorruptCheckpoint(m) => SurgeryError::CorruptCheckpoint(m),
            other => SurgeryError::Net(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EligibilityReport {
    pub eligible: Vec<LayerRef>,
    pub blocked: BTreeMap<LayerRef, String>,
}

impl EligibilityReport {
    pub fn is_eligible(&self, layer: LayerRef) -> bool {
        self.eligible.contains(&layer)
    }
}

/// A block is eligible when it does not open its stage (it is marked
/// removable and keeps the tensor shape) and its stage would still hold at
/// least two blocks afterwards. Applied repeatedly this allows at most `k − 2`
/// removals from a stage of `k` blocks.
pub fn eligible_layers(spec: &ArchitectureSpec) -> EligibilityReport {
    let mut report = EligibilityReport::default();
    for stage in &spec.stages {
        let remaining = stage.blocks.len();
        for b in &stage.blocks {
            let reason = if matches!(b.kind, BlockKind::ResidualDownsample { .. }) {
                Some("changes dimensions at a stage boundary".to_string())
            } else if !b.removable {
                Some("protected stage boundary block".to_string())
            } else if remaining <= 2 {
                Some(format!("stage {} would keep fewer than 2 blocks", b.id.stage))
            } else {
                None
            };
            match reason {
                Some(r) => {
                    report.blocked.insert(b.id, r);
                }
                None => report.eligible.push(b.id),
            }
        }
    }
    report
}

/// Builds the architecture without `victim` and transfers every surviving
/// tensor bit-exactly.
pub fn remove_block(ckpt: &ModelCheckpoint, victim: LayerRef) -> Result<ModelCheckpoint, SurgeryError> {
    let report = eligible_layers(&ckpt.architecture);
    if !report.is_eligible(victim) {
        let reason = report
            .blocked
            .get(&victim)
            .cloned()
            .unwrap_or_else(|| "no such block".to_string());
        return Err(SurgeryError::IneligibleLayer { layer: victim, reason });
    }
    // Fails on missing, misshapen or orphan tensors.
    Model::<f32>::from_checkpoint(ckpt)?;

    let mut architecture = ckpt.architecture.clone();
    for stage in &mut architecture.stages {
        stage.blocks.retain(|b| b.id != victim);
    }
    architecture.validate()?;
    let prefix = format!("{victim}.");
    let weights = ckpt
        .weights
        .iter()
        .filter(|(name, _)| !name.starts_with(&prefix))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    Ok(ModelCheckpoint {
        architecture,
        weights,
        meta: ckpt.meta.clone(),
    })
}

/// Logits of the original network with the residual branch of `victim`
/// forced to zero. A test oracle only: it saves no computation.
pub fn zero_branch_oracle(
    ckpt: &ModelCheckpoint,
    victim: LayerRef,
    probes: ArrayView2<'_, f32>,
) -> Result<Array2<f32>, SurgeryError> {
    let mut model = Model::<f32>::from_checkpoint(ckpt)?;
    match model.set_zero_branch(victim) {
        Ok(()) => {}
        Err(NetError::NoIdentityShortcut(id)) => return Err(SurgeryError::OracleUndefined(id)),
        Err(e) => return Err(e.into()),
    }
    Ok(model.predict(probes, 256))
}
