//! Network substrate: architecture specs, a small CPU implementation of the
//! residual CNN and tabular transformer families, checkpoints, data and
//! training.

pub mod checkpoint;
pub mod data;
pub mod layers;
pub mod model;
pub mod resnet;
pub mod spec;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use checkpoint::{Augmentation, ModelCheckpoint, TrainingMeta};
pub use data::{Dataset, Domain, TrainData};
pub use layers::Mode;
pub use model::{extract_representation, Model};
pub use spec::{
    ArchitectureSpec, BlockKind, BlockSpec, Family, HeadSpec, InputShape, LayerRef, ResnetShape, StageSpec,
    StemSpec, TransformerShape,
};
pub use tensor::{Float, Param, Tensor};
pub use train::{finetune, train, LrSchedule, TrainConfig};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid architecture: {0}")]
    Spec(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("no block {0} in this architecture")]
    UnknownBlock(LayerRef),
    #[error("block {0} has no identity shortcut")]
    NoIdentityShortcut(LayerRef),
    #[error("invalid probes: {0}")]
    InvalidProbes(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step}")]
    TrainingDiverged { epoch: usize, step: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
