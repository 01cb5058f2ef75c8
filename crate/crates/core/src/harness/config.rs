use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::detector::{channel_means_for, ModelSpec, PredictOptions};
use crate::geometry::{AnchorConfig, DEFAULT_NEG_THRESHOLD, DEFAULT_POS_THRESHOLD};
use crate::inputs::{FlowInputOptions, Variant};

/// Architecture knobs shared by every variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone_widths: Vec<usize>,
    pub convs_per_stage: usize,
    pub pyramid_width: usize,
    pub head_depth: usize,
    pub anchors: AnchorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let s = ModelSpec::new(Variant::Baseline, 1);
        Self {
            backbone_widths: s.backbone_widths,
            convs_per_stage: s.convs_per_stage,
            pyramid_width: s.pyramid_width,
            head_depth: s.head_depth,
            anchors: s.anchor_config,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, variant: Variant, num_classes: usize, rgb_means: [f64; 3]) -> ModelSpec {
        ModelSpec {
            anchor_config: self.anchors.clone(),
            pyramid_levels: self.anchors.pyramid_strides.clone(),
            backbone_widths: self.backbone_widths.clone(),
            convs_per_stage: self.convs_per_stage,
            pyramid_width: self.pyramid_width,
            head_depth: self.head_depth,
            channel_means: channel_means_for(variant, rgb_means),
            ..ModelSpec::new(variant, num_classes)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Corpus directory (written by `generate`).
    pub dataset: Option<PathBuf>,
    pub variant: Variant,
    /// Frame offset `i` between preceding and target frame.
    pub offset: u32,
    pub learning_rate: f64,
    /// Cosine decay to `learning_rate * lr_final_fraction` at the last step;
    /// 1 keeps the rate constant.
    pub lr_final_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Parameter updates.
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of the regression term.
    pub lambda: f64,
    pub gamma: f64,
    /// Class weights from inverse training frequency instead of all ones.
    pub class_balanced_alpha: bool,
    pub pos_threshold: f64,
    pub neg_threshold: f64,
    /// Evaluate on the test split every this many steps; 0 only at the end.
    pub eval_every: usize,
    pub eval_iou: f64,
    /// Frames before this index are never used as targets.
    pub first_target_frame: usize,
    pub model: ModelConfig,
    pub flow: FlowInputOptions,
    pub predict: PredictOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            variant: Variant::Double,
            offset: 1,
            learning_rate: 1e-5,
            lr_final_fraction: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 1000,
            batch_size: 1,
            seed: 0,
            lambda: 1.0,
            gamma: 2.0,
            class_balanced_alpha: true,
            pos_threshold: DEFAULT_POS_THRESHOLD,
            neg_threshold: DEFAULT_NEG_THRESHOLD,
            eval_every: 0,
            eval_iou: 0.5,
            first_target_frame: 1,
            model: ModelConfig::default(),
            flow: FlowInputOptions::default(),
            predict: PredictOptions::default(),
        }
    }
}

impl TrainConfig {
    /// Learning rate for update `step` (0-based).
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if self.lr_final_fraction == 1.0 || self.steps <= 1 {
            return self.learning_rate;
        }
        let progress = step as f64 / (self.steps - 1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * (self.lr_final_fraction + (1.0 - self.lr_final_fraction) * cos)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.lr_final_fraction) {
            return bad("lr_final_fraction must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("adam needs beta1, beta2 in [0, 1) and epsilon > 0");
        }
        if self.batch_size == 0 || self.offset == 0 {
            return bad("batch_size and offset must be positive");
        }
        if !(self.lambda >= 0.0) || !(self.gamma >= 0.0) {
            return bad("lambda and gamma must be non-negative");
        }
        if !(self.eval_iou > 0.0 && self.eval_iou < 1.0) {
            return bad("eval_iou must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.neg_threshold) || self.neg_threshold > self.pos_threshold || self.pos_threshold > 1.0 {
            return bad("need 0 <= neg_threshold <= pos_threshold <= 1");
        }
        self.model.anchors.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.flow.params.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }
}

pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::Io(path.display().to_string(), e))?;
    toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String, HarnessError> {
    toml::to_string_pretty(value).map_err(|e| HarnessError::Config(e.to_string()))
}
