//! Training loop, configuration and the experiment suite.

mod config;
mod experiments;
mod train;

use thiserror::Error;

pub use config::{load_toml, to_toml, ModelConfig, TrainConfig};
pub use experiments::{
    experiment_compare_variants, experiment_fallback, experiment_offset_sweep, experiment_transfer, write_experiment,
    Check, ExperimentConfig, ExperimentKind, ExperimentReport, Row, RunSummary,
};
pub use train::{
    build_samples, evaluate_samples, model_spec_for, predict_all, sample_spec, train, train_from, train_on, write_run,
    Adam, EvalEntry, Pairing, RunLog, Sample, SampleSpec, StepLoss, Timings, CHECKPOINT_FILE, RUNLOG_FILE,
};

use crate::detector::DetectorError;
use crate::eval::EvalError;
use crate::geometry::GeometryError;
use crate::inputs::InputError;
use crate::losses::LossError;
use crate::synthdata::SynthError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Input(#[from] InputError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}
