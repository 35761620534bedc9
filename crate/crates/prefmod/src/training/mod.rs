//! Training procedures, batching, and checkpoint persistence.

mod batches;
mod checkpoint;
mod stages;
#[cfg(test)]
mod tests;

pub use batches::{Batch, BatchSchedule};
pub use checkpoint::{
    export_user_embedding, import_user_embedding, Checkpoint, MetricPoint, CHECKPOINT_VERSION,
};
pub use stages::{
    configs_compatible, empty_prompt_delta_vectors, empty_prompt_separation, hash_adapters,
    mean_delta_magnitude,
    hash_backbone, hash_bank, preference_deltas, preference_deltas_detached, pretrain_backbone, stage1_initial_state,
    train_new_user, train_stage1, NewUserFit,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training configuration error: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence {
        step: u64,
        detail: String,
        /// State after the last step that completed with finite values.
        last_finite: Box<Checkpoint>,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Data(#[from] crate::synth::DataError),
}
