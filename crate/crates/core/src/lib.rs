//! Similarity-guided depth pruning: representation metrics, rank-consensus
//! block selection, checkpoint surgery, cost accounting and robustness
//! evaluation, plus the experiment driver that ties them together.

pub mod metrics;
pub mod net;
pub mod accounting;
pub mod consensus;
pub mod surgery;
pub mod robustness;
pub mod campaign;
