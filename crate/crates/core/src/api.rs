//! Request and response bodies of the HTTP service. Paths are interpreted on
//! the server's filesystem.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::eval::EvalReport;
use crate::harness::{Check, ExperimentConfig, ExperimentKind, Row, TrainConfig};
use crate::synthdata::CorpusSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub spec: CorpusSpec,
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResult {
    pub output: PathBuf,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub annotated_boxes: usize,
    pub channel_means: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    pub config: TrainConfig,
    /// Run directory for the checkpoint, RunLog and final report.
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub output: PathBuf,
    pub checkpoint: PathBuf,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub map: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[default]
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateRequest {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub output: PathBuf,
    #[serde(default)]
    pub split: Split,
    /// Offset, flow, prediction and IoU settings; variant comes from the
    /// checkpoint.
    #[serde(default)]
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateResult {
    pub output: PathBuf,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRequest {
    pub kind: ExperimentKind,
    pub config: ExperimentConfig,
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub output: PathBuf,
    pub passed: bool,
    pub rows: Vec<Row>,
    pub checks: Vec<Check>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobCreated {
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: String,
    pub kind: String,
    pub state: JobState,
    /// Operation-specific result body once the job succeeded.
    pub result: Option<serde_json::Value>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
}
