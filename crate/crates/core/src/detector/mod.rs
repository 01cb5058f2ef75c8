//! Miniature RetinaNet: a plain convolutional backbone, a small top-down
//! feature pyramid and shared classification / box-regression heads, with
//! hand-written backpropagation.

mod checkpoint;
mod model;
pub mod nn;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use model::{
    build_model, channel_means_for, classifier_parameter_names, flatten, transfer_weights, LevelOutput,
    ModelSpec, ModelState, PredictOptions, PRIOR_PROBABILITY,
};

use crate::losses::LossError;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("input has {got} channels, model expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("cannot transfer weights: {0}")]
    TransferMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests;
