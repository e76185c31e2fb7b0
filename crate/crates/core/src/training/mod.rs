//! Optimisation: Adam with the Noam schedule, the training loop, top-k
//! checkpoint tracking and checkpoint averaging.

mod adam;
mod checkpoint;
mod schedule;
mod topk;
mod trainer;

pub use adam::{clip_global_norm, AdamConfig, OptimizerState};
pub use checkpoint::{
    average_checkpoints, CheckpointArchive, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use schedule::noam_lr;
pub use topk::{TopKEntry, TopKTracker};
pub use trainer::{train, StepRecord, TrainConfig, TrainReport, Validator};
