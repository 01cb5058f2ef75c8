use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::nn::{GradMap, NodeId, Param, ParamMap, Tape, Tensor3};
use super::DetectorError;
use crate::geometry::{decode_box, generate_anchors, nms, AnchorConfig, Assignment, BBox, Detection};
use crate::inputs::{ModelInput, Variant};
use crate::losses::{detection_loss_with_grad, FocalParams, LossValue};

/// Foreground probability the classification head starts at.
pub const PRIOR_PROBABILITY: f64 = 0.01;

/// Architecture of a miniature RetinaNet.
///
/// The backbone has one stage per entry of `backbone_widths`; every stage
/// halves the resolution with its first convolution, so stage `s` has stride
/// `2^(s+1)`. `pyramid_levels` picks which stage strides feed the pyramid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub input_channels: usize,
    pub num_classes: usize,
    pub anchor_config: AnchorConfig,
    pub backbone_widths: Vec<usize>,
    pub convs_per_stage: usize,
    pub pyramid_levels: Vec<u32>,
    pub pyramid_width: usize,
    pub head_depth: usize,
    /// Input channel names in order.
    pub channel_layout: Vec<String>,
    /// Subtracted from each input channel before the first convolution.
    pub channel_means: Vec<f64>,
}

impl ModelSpec {
    /// Desk-scale defaults for `variant` with `num_classes` classes.
    pub fn new(variant: Variant, num_classes: usize) -> Self {
        let anchor_config = AnchorConfig::default();
        Self {
            variant,
            input_channels: variant.input_channels(),
            num_classes,
            pyramid_levels: anchor_config.pyramid_strides.clone(),
            anchor_config,
            backbone_widths: vec![16, 32, 64],
            convs_per_stage: 2,
            pyramid_width: 32,
            head_depth: 1,
            channel_layout: variant.channel_layout(),
            channel_means: vec![0.0; variant.input_channels()],
        }
    }

    /// The same architecture for another variant (first layer width and
    /// channel bookkeeping change, nothing else).
    pub fn with_variant(&self, variant: Variant, rgb_means: [f64; 3]) -> Self {
        Self {
            variant,
            input_channels: variant.input_channels(),
            channel_layout: variant.channel_layout(),
            channel_means: channel_means_for(variant, rgb_means),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: String| Err(DetectorError::InvalidSpec(m));
        if self.input_channels != self.variant.input_channels() {
            return bad(format!(
                "{} variant needs {} input channels, spec has {}",
                self.variant,
                self.variant.input_channels(),
                self.input_channels
            ));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        self.anchor_config
            .validate()
            .map_err(|e| DetectorError::InvalidSpec(e.to_string()))?;
        if self.backbone_widths.is_empty() || self.backbone_widths.contains(&0) {
            return bad("backbone widths must be non-empty and positive".into());
        }
        if self.convs_per_stage == 0 || self.pyramid_width == 0 {
            return bad("convs_per_stage and pyramid_width must be positive".into());
        }
        if self.pyramid_levels.is_empty() || self.pyramid_levels.windows(2).any(|w| w[0] >= w[1]) {
            return bad("pyramid levels must be non-empty and strictly increasing".into());
        }
        for &l in &self.pyramid_levels {
            if !self.anchor_config.pyramid_strides.contains(&l) {
                return bad(format!("pyramid level {l} has no anchors"));
            }
            if self.stage_of_stride(l).is_none() {
                return bad(format!("no backbone stage has stride {l}"));
            }
        }
        if self.channel_layout.len() != self.input_channels || self.channel_means.len() != self.input_channels {
            return bad("channel layout and means must have one entry per input channel".into());
        }
        Ok(())
    }

    fn stage_of_stride(&self, stride: u32) -> Option<usize> {
        (0..self.backbone_widths.len()).find(|&s| 2u32.pow(s as u32 + 1) == stride)
    }

    /// Anchors restricted to the levels the network predicts on.
    pub fn level_anchor_config(&self) -> AnchorConfig {
        AnchorConfig {
            pyramid_strides: self.pyramid_levels.clone(),
            ..self.anchor_config.clone()
        }
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_config.anchors_per_cell()
    }

    pub fn anchors(&self, width: usize, height: usize) -> Result<Vec<BBox>, DetectorError> {
        generate_anchors(&self.level_anchor_config(), width, height)
            .map_err(|e| DetectorError::InvalidSpec(e.to_string()))
    }

    /// Parameter names and shapes in initialization order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, o: usize, i: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![o, i, k, k]));
            out.push((format!("{name}.bias"), vec![o]));
        };
        let mut c_in = self.input_channels;
        for (s, &w) in self.backbone_widths.iter().enumerate() {
            for j in 0..self.convs_per_stage {
                conv(format!("backbone.stage{s}.conv{j}"), w, c_in, 3);
                c_in = w;
            }
        }
        let f = self.pyramid_width;
        for &l in &self.pyramid_levels {
            let s = self.stage_of_stride(l).expect("validated");
            conv(format!("fpn.lateral_s{l}"), f, self.backbone_widths[s], 1);
        }
        for &l in &self.pyramid_levels {
            conv(format!("fpn.output_s{l}"), f, f, 3);
        }
        let a = self.anchors_per_cell();
        for branch in ["cls", "reg"] {
            for d in 0..self.head_depth {
                conv(format!("head.{branch}.hidden{d}"), f, f, 3);
            }
        }
        conv(CLS_OUT.to_string(), a * self.num_classes, f, 3);
        conv(REG_OUT.to_string(), a * 4, f, 3);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

pub(crate) const CLS_OUT: &str = "head.cls.out";
pub(crate) const REG_OUT: &str = "head.reg.out";

/// Per-channel means for a variant given the dataset's RGB means. Flow
/// channels are centered on the zero-motion code.
pub fn channel_means_for(variant: Variant, rgb: [f64; 3]) -> Vec<f64> {
    let zero_motion = crate::flow::ZERO_MOTION_CODE as f64;
    match variant {
        Variant::Baseline => rgb.to_vec(),
        Variant::Double => [rgb, rgb].concat(),
        Variant::Flow => [[zero_motion; 3], rgb].concat(),
    }
}

/// Learned parameters of a model and the spec they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub params: ParamMap,
    pub step: u64,
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Fresh model. Convolutions feeding ReLUs get He-normal weights, the heads
/// get N(0, 0.01²), biases start at zero except the classification output,
/// which starts at `-ln((1 - π) / π)` for prior probability π.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ModelState, DetectorError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamMap::new();
    let prior_bias = -((1.0 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY).ln();
    for (name, shape) in spec.parameter_layout() {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = if name.ends_with(".bias") {
            let v = if name == format!("{CLS_OUT}.bias") { prior_bias } else { 0.0 };
            vec![round_f32(v); n]
        } else {
            let std = if name.starts_with("head.") {
                0.01
            } else {
                let fan_in: usize = shape[1..].iter().product();
                (2.0 / fan_in as f64).sqrt()
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| round_f32(normal.sample(&mut rng))).collect()
        };
        params.insert(name, Param { shape, data });
    }
    Ok(ModelState {
        spec: spec.clone(),
        params,
        step: 0,
    })
}

/// Outputs of one pyramid level, laid out `height × width × channels` so that
/// concatenating levels gives anchor-major arrays in anchor order.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelOutput {
    pub stride: usize,
    pub width: usize,
    pub height: usize,
    /// Sigmoid probabilities, `A·K` per cell.
    pub cls: Vec<f64>,
    /// Box deltas, `A·4` per cell.
    pub reg: Vec<f64>,
}

struct ForwardPass {
    tape: Tape,
    /// (cls logits node, reg node) per level
    heads: Vec<(NodeId, NodeId)>,
    outputs: Vec<LevelOutput>,
}

fn chw_to_hwc(t: &Tensor3) -> Vec<f64> {
    let mut out = vec![0.0; t.data.len()];
    for c in 0..t.c {
        for p in 0..t.h * t.w {
            out[p * t.c + c] = t.data[c * t.h * t.w + p];
        }
    }
    out
}

fn hwc_to_chw(data: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for ci in 0..c {
        for p in 0..h * w {
            out[ci * h * w + p] = data[p * c + ci];
        }
    }
    out
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ModelState {
    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Param::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, input: &ModelInput) -> Result<(), DetectorError> {
        let (_, _, c) = input.shape();
        if c != self.spec.input_channels {
            return Err(DetectorError::ChannelMismatch {
                expected: self.spec.input_channels,
                got: c,
            });
        }
        Ok(())
    }

    /// Mean-subtracted input, zero-padded on the right and bottom.
    fn prepare(&self, input: &ModelInput) -> Tensor3 {
        let planes = input.planes();
        let (w, h, c) = planes.shape();
        let (pw, ph) = self.spec.level_anchor_config().padded_size(w, h);
        let mut t = Tensor3::zeros(c, ph, pw);
        for ci in 0..c {
            let mean = self.spec.channel_means[ci];
            let src = planes.plane(ci);
            for y in 0..h {
                let dst = &mut t.data[(ci * ph + y) * pw..][..w];
                for (d, &s) in dst.iter_mut().zip(&src[y * w..(y + 1) * w]) {
                    *d = s as f64 - mean;
                }
            }
        }
        t
    }

    fn run(&self, input: &ModelInput, for_training: bool) -> ForwardPass {
        let spec = &self.spec;
        let p = &self.params;
        let mut tape = Tape::new();
        let mut x = tape.input(self.prepare(input));
        let mut stage_out = Vec::new();
        for s in 0..spec.backbone_widths.len() {
            for j in 0..spec.convs_per_stage {
                let stride = if j == 0 { 2 } else { 1 };
                let first_layer = s == 0 && j == 0;
                x = tape.conv(p, &format!("backbone.stage{s}.conv{j}"), x, stride, true, for_training && !first_layer);
            }
            stage_out.push(x);
        }

        // top-down pathway, coarsest level first
        let levels = &spec.pyramid_levels;
        let mut merged: Vec<NodeId> = vec![0; levels.len()];
        for (li, &l) in levels.iter().enumerate().rev() {
            let s = spec.stage_of_stride(l).expect("validated");
            let lat = tape.conv(p, &format!("fpn.lateral_s{l}"), stage_out[s], 1, false, for_training);
            merged[li] = if li + 1 < levels.len() {
                let factor = (levels[li + 1] / l) as usize;
                let up = tape.upsample(merged[li + 1], factor);
                tape.add(lat, up)
            } else {
                lat
            };
        }

        let mut heads = Vec::with_capacity(levels.len());
        let mut outputs = Vec::with_capacity(levels.len());
        for (li, &l) in levels.iter().enumerate() {
            let feat = tape.conv(p, &format!("fpn.output_s{l}"), merged[li], 1, false, for_training);
            let mut c = feat;
            let mut r = feat;
            for d in 0..spec.head_depth {
                c = tape.conv(p, &format!("head.cls.hidden{d}"), c, 1, true, for_training);
                r = tape.conv(p, &format!("head.reg.hidden{d}"), r, 1, true, for_training);
            }
            let cls = tape.conv(p, CLS_OUT, c, 1, false, for_training);
            let reg = tape.conv(p, REG_OUT, r, 1, false, for_training);
            let (ct, rt) = (tape.node(cls), tape.node(reg));
            let mut probs = chw_to_hwc(ct);
            for v in probs.iter_mut() {
                *v = sigmoid(*v);
            }
            outputs.push(LevelOutput {
                stride: l as usize,
                width: ct.w,
                height: ct.h,
                cls: probs,
                reg: chw_to_hwc(rt),
            });
            heads.push((cls, reg));
        }
        ForwardPass { tape, heads, outputs }
    }

    /// Per-level class probabilities and box deltas.
    pub fn forward(&self, input: &ModelInput) -> Result<Vec<LevelOutput>, DetectorError> {
        self.check_input(input)?;
        Ok(self.run(input, false).outputs)
    }

    /// Detection loss for one input and its parameter gradients.
    pub fn loss_and_gradients(
        &self,
        input: &ModelInput,
        assignment: &Assignment,
        focal: &FocalParams,
        lambda: f64,
    ) -> Result<(LossValue, GradMap), DetectorError> {
        self.check_input(input)?;
        let pass = self.run(input, true);
        let (probs, regs) = flatten(&pass.outputs);
        let lg = detection_loss_with_grad(&probs, &regs, assignment, focal, lambda)?;

        let k = self.spec.num_classes;
        let a = self.spec.anchors_per_cell();
        let mut seeds = Vec::with_capacity(2 * pass.outputs.len());
        let (mut cls_off, mut reg_off) = (0, 0);
        for (out, &(cls_node, reg_node)) in pass.outputs.iter().zip(&pass.heads) {
            let ncls = out.cls.len();
            // dL/dlogit = dL/dp · p(1 - p)
            let dlogit: Vec<f64> = out
                .cls
                .iter()
                .zip(&lg.cls_grad[cls_off..cls_off + ncls])
                .map(|(&p, &g)| g * p * (1.0 - p))
                .collect();
            seeds.push((cls_node, hwc_to_chw(&dlogit, a * k, out.height, out.width)));
            cls_off += ncls;

            let anchors = out.reg.len() / 4;
            let dreg: Vec<f64> = lg.reg_grad[reg_off..reg_off + anchors].iter().flatten().copied().collect();
            seeds.push((reg_node, hwc_to_chw(&dreg, a * 4, out.height, out.width)));
            reg_off += anchors;
        }
        let grads = pass.tape.backward(&self.params, seeds);
        Ok((lg.value, grads))
    }

    /// Loss only (used by finite-difference checks and evaluation).
    pub fn loss(
        &self,
        input: &ModelInput,
        assignment: &Assignment,
        focal: &FocalParams,
        lambda: f64,
    ) -> Result<LossValue, DetectorError> {
        let outputs = self.forward(input)?;
        let (probs, regs) = flatten(&outputs);
        Ok(crate::losses::detection_loss(&probs, &regs, assignment, focal, lambda)?)
    }

    /// Thresholded, decoded and suppressed detections, at most `max_dets`.
    pub fn predict(&self, input: &ModelInput, opts: &PredictOptions) -> Result<Vec<Detection>, DetectorError> {
        let outputs = self.forward(input)?;
        let (w, h, _) = input.shape();
        let anchors = self.spec.anchors(w, h)?;
        let (probs, regs) = flatten(&outputs);
        let k = self.spec.num_classes;
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (i, row) in probs.chunks_exact(k).enumerate() {
            for (c, &p) in row.iter().enumerate() {
                if p >= opts.score_threshold {
                    candidates.push((p, i, c));
                }
            }
        }
        // stable: equal scores stay in anchor order
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
        candidates.truncate(opts.pre_nms_top_k);
        let dets: Vec<Detection> = candidates
            .into_iter()
            .filter_map(|(score, i, class_id)| {
                decode_box(&anchors[i], &regs[i], Some((w as f64, h as f64)))
                    .ok()
                    .map(|bbox| Detection { bbox, class_id, score })
            })
            .collect();
        let mut kept = nms(&dets, opts.nms_threshold);
        kept.truncate(opts.max_detections);
        Ok(kept)
    }
}

/// Concatenates level outputs into anchor-major probability and delta arrays.
pub fn flatten(outputs: &[LevelOutput]) -> (Vec<f64>, Vec<[f64; 4]>) {
    let probs: Vec<f64> = outputs.iter().flat_map(|o| o.cls.iter().copied()).collect();
    let regs: Vec<[f64; 4]> = outputs
        .iter()
        .flat_map(|o| o.reg.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]))
        .collect();
    (probs, regs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictOptions {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_detections: usize,
    pub pre_nms_top_k: usize,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_threshold: 0.5,
            max_detections: 100,
            pre_nms_top_k: 1000,
        }
    }
}

/// Copies `src` into `dst`. The final classification layer is copied only
/// when both models have the same number of classes; otherwise `dst` keeps
/// its own. Every other parameter must match in shape.
pub fn transfer_weights(src: &ModelState, dst: &ModelState) -> Result<ModelState, DetectorError> {
    let same_but_classes = ModelSpec {
        num_classes: dst.spec.num_classes,
        ..src.spec.clone()
    };
    if same_but_classes != dst.spec {
        return Err(DetectorError::TransferMismatch(
            "model specs differ in more than the number of classes".into(),
        ));
    }
    let copy_classifier = src.spec.num_classes == dst.spec.num_classes;
    let mut params = BTreeMap::new();
    for (name, d) in &dst.params {
        let is_classifier = name.starts_with(CLS_OUT);
        let value = if is_classifier && !copy_classifier {
            d.clone()
        } else {
            let s = src
                .params
                .get(name)
                .ok_or_else(|| DetectorError::TransferMismatch(format!("source lacks {name}")))?;
            if s.shape != d.shape {
                return Err(DetectorError::TransferMismatch(format!(
                    "{name}: {:?} vs {:?}",
                    s.shape, d.shape
                )));
            }
            s.clone()
        };
        params.insert(name.clone(), value);
    }
    Ok(ModelState {
        spec: dst.spec.clone(),
        params,
        step: 0,
    })
}

/// Names of the parameters that [`transfer_weights`] never copies across
/// different class counts.
pub fn classifier_parameter_names() -> [String; 2] {
    [format!("{CLS_OUT}.weight"), format!("{CLS_OUT}.bias")]
}
