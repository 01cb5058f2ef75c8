//! Network inputs for the three detector variants.
//!
//! Every multi-frame input lists the auxiliary channels first and the target
//! frame last, so channels `C-3..C` are always the target image.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{farneback_flow, flow_image, FlowError, FlowParams, DEFAULT_FLOW_CLAMP};
use crate::image::Planar;

#[derive(Debug, Error)]
pub enum InputError {
    #[error("frame sizes differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("frame has {0} channels, expected 3")]
    NotRgb(usize),
    #[error("pixel value {0} outside [0, 1]")]
    PixelRange(f32),
    #[error("frame has zero size")]
    Empty,
    #[error("preceding frame index {preceding} is not target index {target} minus offset {offset}")]
    InconsistentOffset { preceding: i64, target: i64, offset: u32 },
    #[error("empty frame sequence")]
    EmptySequence,
    #[error("target index {t} outside sequence of {len} frames")]
    TargetOutOfRange { t: usize, len: usize },
    #[error("offset must be positive")]
    ZeroOffset,
    #[error("flow: {0}")]
    Flow(#[from] FlowError),
}

/// Which input the detector consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Double,
    Flow,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::Double, Variant::Flow];

    pub fn input_channels(self) -> usize {
        match self {
            Variant::Baseline => 3,
            Variant::Double | Variant::Flow => 6,
        }
    }

    /// Channel names in input order.
    pub fn channel_layout(self) -> Vec<String> {
        let names: &[&str] = match self {
            Variant::Baseline => &["target.r", "target.g", "target.b"],
            Variant::Double => &[
                "preceding.r",
                "preceding.g",
                "preceding.b",
                "target.r",
                "target.g",
                "target.b",
            ],
            Variant::Flow => &["flow.x", "flow.y", "flow.norm", "target.r", "target.g", "target.b"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Double => "double",
            Variant::Flow => "flow",
        })
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "double" => Ok(Variant::Double),
            "flow" => Ok(Variant::Flow),
            other => Err(format!("unknown variant '{other}' (baseline, double, flow)")),
        }
    }
}

/// An RGB frame with values in `[0, 1]` and its position in the sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pixels: Planar,
    pub time_index: i64,
}

impl Frame {
    pub fn new(pixels: Planar, time_index: i64) -> Result<Self, InputError> {
        if pixels.channels() != 3 {
            return Err(InputError::NotRgb(pixels.channels()));
        }
        if pixels.width() == 0 || pixels.height() == 0 {
            return Err(InputError::Empty);
        }
        if let Some(&v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(InputError::PixelRange(v));
        }
        Ok(Self { pixels, time_index })
    }

    pub fn pixels(&self) -> &Planar {
        &self.pixels
    }
    pub fn width(&self) -> usize {
        self.pixels.width()
    }
    pub fn height(&self) -> usize {
        self.pixels.height()
    }
    pub fn size(&self) -> (usize, usize) {
        (self.width(), self.height())
    }
}

/// A preceding frame and a target frame of the same size. Offset 0 marks a
/// duplicated frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    preceding: Frame,
    target: Frame,
    offset: u32,
}

impl FramePair {
    pub fn new(preceding: Frame, target: Frame, offset: u32) -> Result<Self, InputError> {
        if preceding.size() != target.size() {
            return Err(InputError::DimensionMismatch(preceding.size(), target.size()));
        }
        if preceding.time_index != target.time_index - offset as i64 {
            return Err(InputError::InconsistentOffset {
                preceding: preceding.time_index,
                target: target.time_index,
                offset,
            });
        }
        Ok(Self {
            preceding,
            target,
            offset,
        })
    }

    pub fn preceding(&self) -> &Frame {
        &self.preceding
    }
    pub fn target(&self) -> &Frame {
        &self.target
    }
    pub fn offset(&self) -> u32 {
        self.offset
    }
}

/// Network input: `channels` planes of the frame size, tagged by variant.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    variant: Variant,
    planes: Planar,
}

impl ModelInput {
    pub fn variant(&self) -> Variant {
        self.variant
    }
    pub fn planes(&self) -> &Planar {
        &self.planes
    }
    /// `(width, height, channels)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.planes.shape()
    }
    /// The target frame: always the last three channels.
    pub fn target(&self) -> Planar {
        let c = self.planes.channels();
        self.planes.channel_range(c - 3, c)
    }

    /// Wraps raw planes; fails unless the channel count fits the variant.
    pub fn from_planes(variant: Variant, planes: Planar) -> Option<Self> {
        (planes.channels() == variant.input_channels()).then_some(Self { variant, planes })
    }
}

/// How flow inputs are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowInputOptions {
    pub params: FlowParams,
    /// Displacement (pixels) mapped to the ends of the channel range.
    pub clamp: f32,
}

impl Default for FlowInputOptions {
    fn default() -> Self {
        Self {
            params: FlowParams::default(),
            clamp: DEFAULT_FLOW_CLAMP,
        }
    }
}

pub fn build_baseline_input(target: &Frame) -> ModelInput {
    ModelInput {
        variant: Variant::Baseline,
        planes: target.pixels.clone(),
    }
}

/// Preceding frame channels, then target channels.
pub fn build_double_input(pair: &FramePair) -> Result<ModelInput, InputError> {
    let planes = Planar::concat(&[&pair.preceding.pixels, &pair.target.pixels])
        .ok_or(InputError::DimensionMismatch(pair.preceding.size(), pair.target.size()))?;
    Ok(ModelInput {
        variant: Variant::Double,
        planes,
    })
}

/// Flow image of (preceding → target), then target channels.
pub fn build_flow_input(pair: &FramePair, options: &FlowInputOptions) -> Result<ModelInput, InputError> {
    let field = farneback_flow(&pair.preceding.pixels, &pair.target.pixels, &options.params)?;
    let flow = flow_image(&field, options.clamp);
    let planes = Planar::concat(&[&flow, &pair.target.pixels])
        .ok_or(InputError::DimensionMismatch(pair.preceding.size(), pair.target.size()))?;
    Ok(ModelInput {
        variant: Variant::Flow,
        planes,
    })
}

pub fn build_input(variant: Variant, pair: &FramePair, flow: &FlowInputOptions) -> Result<ModelInput, InputError> {
    match variant {
        Variant::Baseline => Ok(build_baseline_input(&pair.target)),
        Variant::Double => build_double_input(pair),
        Variant::Flow => build_flow_input(pair, flow),
    }
}

/// Pairs frame `t` with frame `max(t - i, 0)`; the recorded offset is the
/// actual gap, so the first frame pairs with itself at offset 0.
pub fn select_preceding(sequence: &[Frame], t: usize, i: u32) -> Result<FramePair, InputError> {
    if sequence.is_empty() {
        return Err(InputError::EmptySequence);
    }
    if i == 0 {
        return Err(InputError::ZeroOffset);
    }
    if t >= sequence.len() {
        return Err(InputError::TargetOutOfRange { t, len: sequence.len() });
    }
    let p = t.saturating_sub(i as usize);
    let preceding = sequence[p].clone();
    let target = sequence[t].clone();
    let offset = (target.time_index - preceding.time_index) as u32;
    FramePair::new(preceding, target, offset)
}

/// The target paired with itself, for when no preceding frame exists.
pub fn duplicate_fallback(target: &Frame) -> FramePair {
    FramePair {
        preceding: target.clone(),
        target: target.clone(),
        offset: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{sinusoid_texture, ZERO_MOTION_CODE};

    fn frame(seed: u64, w: usize, h: usize, t: i64, shift: f64) -> Frame {
        Frame::new(sinusoid_texture(seed, w, h, shift, 0.0), t).unwrap()
    }

    fn sequence(n: usize) -> Vec<Frame> {
        (0..n).map(|t| frame(1, 24, 16, t as i64, t as f64)).collect()
    }

    #[test]
    fn frame_validation() {
        assert!(matches!(Frame::new(Planar::zeros(4, 4, 1), 0), Err(InputError::NotRgb(1))));
        assert!(matches!(
            Frame::new(Planar::filled(4, 4, 3, 1.5), 0),
            Err(InputError::PixelRange(_))
        ));
        let a = frame(1, 8, 8, 3, 0.0);
        let b = frame(1, 8, 9, 4, 0.0);
        assert!(matches!(FramePair::new(a.clone(), b, 1), Err(InputError::DimensionMismatch(..))));
        let c = frame(1, 8, 8, 5, 0.0);
        assert!(matches!(FramePair::new(a, c, 1), Err(InputError::InconsistentOffset { .. })));
    }

    #[test]
    fn double_input_layout() {
        let seq = sequence(3);
        let pair = select_preceding(&seq, 2, 1).unwrap();
        let input = build_double_input(&pair).unwrap();
        assert_eq!(input.shape(), (24, 16, 6));
        assert_eq!(input.planes().channel_range(0, 3), *seq[1].pixels());
        assert_eq!(input.target(), *seq[2].pixels());

        let same = build_double_input(&duplicate_fallback(&seq[0])).unwrap();
        assert_eq!(same.planes().channel_range(0, 3), same.planes().channel_range(3, 6));
    }

    #[test]
    fn preceding_selection() {
        let seq = sequence(8);
        let p = select_preceding(&seq, 5, 1).unwrap();
        assert_eq!((p.preceding().time_index, p.target().time_index, p.offset()), (4, 5, 1));
        let p = select_preceding(&seq, 5, 3).unwrap();
        assert_eq!((p.preceding().time_index, p.offset()), (2, 3));
        let p = select_preceding(&seq, 0, 1).unwrap();
        assert_eq!((p.preceding().time_index, p.target().time_index, p.offset()), (0, 0, 0));
        let p = select_preceding(&seq, 2, 5).unwrap();
        assert_eq!((p.preceding().time_index, p.offset()), (0, 2));
        assert!(matches!(select_preceding(&[], 0, 1), Err(InputError::EmptySequence)));
        assert!(select_preceding(&seq, 8, 1).is_err());
        assert!(select_preceding(&seq, 3, 0).is_err());
    }

    #[test]
    fn fallback_pair_is_valid() {
        let f = frame(2, 10, 12, 7, 0.0);
        let pair = duplicate_fallback(&f);
        assert_eq!(pair.offset(), 0);
        assert!(FramePair::new(pair.preceding().clone(), pair.target().clone(), pair.offset()).is_ok());
    }

    #[test]
    fn flow_input_on_static_and_moving_pairs() {
        let f = frame(4, 32, 32, 0, 0.0);
        let input = build_flow_input(&duplicate_fallback(&f), &FlowInputOptions::default()).unwrap();
        assert_eq!(input.shape(), (32, 32, 6));
        let flow = input.planes().channel_range(0, 3);
        assert!(flow.data().iter().all(|&v| (v - ZERO_MOTION_CODE).abs() < 0.01));
        assert_eq!(input.target(), *f.pixels());

        let seq = sequence(3);
        let pair = select_preceding(&seq, 2, 1).unwrap();
        let input = build_flow_input(&pair, &FlowInputOptions::default()).unwrap();
        let u = input.planes().plane(0);
        let spread = u.iter().cloned().fold(f32::MIN, f32::max) - u.iter().cloned().fold(f32::MAX, f32::min);
        assert!(spread > 0.0);
        assert_eq!(input.target().data(), seq[2].pixels().data());
    }

    #[test]
    fn variant_parsing_and_layout() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
            assert_eq!(v.channel_layout().len(), v.input_channels());
        }
        assert!("triple".parse::<Variant>().is_err());
        assert!(ModelInput::from_planes(Variant::Double, Planar::zeros(2, 2, 3)).is_none());
    }
}
