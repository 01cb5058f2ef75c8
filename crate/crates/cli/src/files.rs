//! Config file layouts. Each file has an `output` key and one table holding
//! the operation's settings; command-line flags override file values.

use std::path::{Path, PathBuf};

use anyhow::Context;
use pairdet_core::api::Split;
use pairdet_core::harness::{ExperimentConfig, TrainConfig};
use pairdet_core::synthdata::CorpusSpec;
use serde::de::DeserializeOwned;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateFile {
    pub output: Option<PathBuf>,
    pub corpus: CorpusSpec,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub output: Option<PathBuf>,
    pub train: TrainConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateFile {
    pub output: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub split: Split,
    pub iou: Option<f64>,
    /// Offset, flow and prediction settings.
    pub train: TrainConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentFile {
    pub output: Option<PathBuf>,
    pub experiment: ExperimentConfig,
}

/// Parses `path`, or returns the defaults when no file is given.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
