//! Axis-aligned boxes and the anchor machinery built on them.
//!
//! Coordinates are continuous, half-open pixel coordinates: a box
//! `(x1, y1, x2, y2)` covers `[x1, x2) × [y1, y2)` and its area is
//! `(x2 - x1) * (y2 - y1)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Regression deltas larger than this in log-space are rejected on decode.
pub const MAX_LOG_SCALE: f64 = 20.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): need finite coordinates with x1 < x2 and y1 < y2")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("invalid anchor configuration: {0}")]
    InvalidAnchorConfig(String),
    #[error("invalid regression prediction {0:?}")]
    InvalidPrediction([f64; 4]),
    #[error("decoded box is empty after clipping")]
    EmptyAfterClip,
    #[error("positive threshold {pos} is below negative threshold {neg}")]
    InvalidThresholds { pos: f64, neg: f64 },
}

/// An axis-aligned rectangle with `x1 < x2` and `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(GeometryError::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Box of the given size centered on `(cx, cy)`.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersects with `[0, width) × [0, height)`; `None` when nothing is left.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
        .ok()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;
    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Intersection over union, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Anchor layout over a feature pyramid.
///
/// Level `l` with stride `s_l` places anchors of side
/// `base_size * scale * s_l / s_0` (before aspect adjustment), so `base_size`
/// is the anchor side at the finest level and anchors grow with the stride.
/// An aspect ratio `r` is `height / width` at constant area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    pub pyramid_strides: Vec<u32>,
    pub scales: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
    pub base_size: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            pyramid_strides: vec![4, 8],
            scales: vec![1.0, 1.5, 2.25],
            aspect_ratios: vec![0.5, 1.0, 2.0],
            base_size: 8.0,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidAnchorConfig(m.to_string()));
        if self.pyramid_strides.is_empty() || self.scales.is_empty() || self.aspect_ratios.is_empty() {
            return bad("strides, scales and aspect ratios must be non-empty");
        }
        if self.pyramid_strides.contains(&0) {
            return bad("strides must be positive");
        }
        if self.pyramid_strides.windows(2).any(|w| w[0] >= w[1]) {
            return bad("strides must be strictly increasing");
        }
        let positive = |v: &f64| v.is_finite() && *v > 0.0;
        if !self.scales.iter().all(positive) || !self.aspect_ratios.iter().all(positive) {
            return bad("scales and aspect ratios must be positive");
        }
        if !positive(&self.base_size) {
            return bad("base size must be positive");
        }
        Ok(())
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }

    /// Image size rounded up so that every stride divides it.
    pub fn padded_size(&self, width: usize, height: usize) -> (usize, usize) {
        let m = self
            .pyramid_strides
            .iter()
            .fold(1usize, |acc, &s| lcm(acc, s as usize));
        (width.div_ceil(m) * m, height.div_ceil(m) * m)
    }

    /// `(stride, grid_width, grid_height)` per level on the padded image.
    pub fn level_grids(&self, width: usize, height: usize) -> Vec<(usize, usize, usize)> {
        let (pw, ph) = self.padded_size(width, height);
        self.pyramid_strides
            .iter()
            .map(|&s| {
                let s = s as usize;
                (s, pw / s, ph / s)
            })
            .collect()
    }

    pub fn num_anchors(&self, width: usize, height: usize) -> usize {
        self.level_grids(width, height)
            .iter()
            .map(|(_, gw, gh)| gw * gh * self.anchors_per_cell())
            .sum()
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Anchors ordered by level, then grid row, then grid column, then scale,
/// then aspect ratio. This is also the order of the detector's outputs.
pub fn generate_anchors(
    config: &AnchorConfig,
    width: usize,
    height: usize,
) -> Result<Vec<BBox>, GeometryError> {
    config.validate()?;
    let s0 = config.pyramid_strides[0] as f64;
    let mut anchors = Vec::with_capacity(config.num_anchors(width, height));
    for (stride, gw, gh) in config.level_grids(width, height) {
        let stride = stride as f64;
        let mut shapes = Vec::with_capacity(config.anchors_per_cell());
        for &scale in &config.scales {
            let side = config.base_size * scale * stride / s0;
            for &ratio in &config.aspect_ratios {
                let r = ratio.sqrt();
                shapes.push((side / r, side * r));
            }
        }
        for j in 0..gh {
            let cy = stride * (j as f64 + 0.5);
            for i in 0..gw {
                let cx = stride * (i as f64 + 0.5);
                for &(w, h) in &shapes {
                    anchors.push(BBox::from_center(cx, cy, w, h)?);
                }
            }
        }
    }
    Ok(anchors)
}

/// Center/size log-space regression target of `gt` relative to `anchor`.
pub fn encode_box(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (gcx - acx) / aw,
        (gcy - acy) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ]
}

/// Inverse of [`encode_box`], optionally clipped to `(width, height)`.
pub fn decode_box(
    anchor: &BBox,
    t: &[f64; 4],
    clip: Option<(f64, f64)>,
) -> Result<BBox, GeometryError> {
    if t.iter().any(|v| !v.is_finite()) || t[2].abs() > MAX_LOG_SCALE || t[3].abs() > MAX_LOG_SCALE {
        return Err(GeometryError::InvalidPrediction(*t));
    }
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = acx + t[0] * aw;
    let cy = acy + t[1] * ah;
    let w = aw * t[2].exp();
    let h = ah * t[3].exp();
    let decoded = BBox::from_center(cx, cy, w, h).map_err(|_| GeometryError::InvalidPrediction(*t))?;
    match clip {
        Some((cw, ch)) => decoded.clip(cw, ch).ok_or(GeometryError::EmptyAfterClip),
        None => Ok(decoded),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive { gt: usize },
    Negative,
    Ignored,
}

/// Per-anchor training labels. `targets[i]` is the encoded ground truth for
/// positive anchors and zero otherwise; `gt_classes[g]` is the class of
/// ground truth `g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub labels: Vec<AnchorLabel>,
    pub targets: Vec<[f64; 4]>,
    pub gt_classes: Vec<usize>,
}

impl Assignment {
    pub fn num_positive(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, AnchorLabel::Positive { .. }))
            .count()
    }

    /// Class of anchor `i` if it is positive.
    pub fn positive_class(&self, i: usize) -> Option<usize> {
        match self.labels[i] {
            AnchorLabel::Positive { gt } => Some(self.gt_classes[gt]),
            _ => None,
        }
    }
}

pub const DEFAULT_POS_THRESHOLD: f64 = 0.5;
pub const DEFAULT_NEG_THRESHOLD: f64 = 0.4;

/// Threshold assignment with force-matching.
///
/// An anchor is positive for its best ground truth when the best IoU is at
/// least `pos_thr`, negative below `neg_thr` and ignored in between (ties on
/// the best ground truth go to the lower index). Afterwards every ground
/// truth with some overlapping anchor claims its best anchor (lowest index on
/// ties). When several ground truths claim the same anchor, the one with the
/// highest IoU wins, then the lowest ground-truth index.
pub fn assign_anchors(
    anchors: &[BBox],
    gts: &[LabeledBox],
    pos_thr: f64,
    neg_thr: f64,
) -> Result<Assignment, GeometryError> {
    if pos_thr < neg_thr {
        return Err(GeometryError::InvalidThresholds { pos: pos_thr, neg: neg_thr });
    }
    let mut labels = vec![AnchorLabel::Negative; anchors.len()];
    let mut targets = vec![[0.0; 4]; anchors.len()];
    let gt_classes: Vec<usize> = gts.iter().map(|g| g.class_id).collect();
    if gts.is_empty() {
        return Ok(Assignment { labels, targets, gt_classes });
    }

    // best anchor per gt: (iou, anchor index)
    let mut best_for_gt = vec![(0.0f64, usize::MAX); gts.len()];
    for (ai, anchor) in anchors.iter().enumerate() {
        let mut best = (0.0f64, 0usize);
        for (gi, gt) in gts.iter().enumerate() {
            let o = iou(anchor, &gt.bbox);
            if o > best.0 {
                best = (o, gi);
            }
            if o > best_for_gt[gi].0 {
                best_for_gt[gi] = (o, ai);
            }
        }
        labels[ai] = if best.0 >= pos_thr {
            AnchorLabel::Positive { gt: best.1 }
        } else if best.0 < neg_thr {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignored
        };
    }

    // claims[anchor] = (iou, gt) of the winning force-match
    let mut claims: Vec<(usize, f64, usize)> = Vec::new();
    for (gi, &(o, ai)) in best_for_gt.iter().enumerate() {
        if ai == usize::MAX {
            continue;
        }
        match claims.iter_mut().find(|c| c.0 == ai) {
            Some(c) => {
                if o > c.1 {
                    *c = (ai, o, gi);
                }
            }
            None => claims.push((ai, o, gi)),
        }
    }
    for (ai, _, gi) in claims {
        labels[ai] = AnchorLabel::Positive { gt: gi };
    }

    for (ai, label) in labels.iter().enumerate() {
        if let AnchorLabel::Positive { gt } = *label {
            targets[ai] = encode_box(&anchors[ai], &gts[gt].bbox);
        }
    }
    Ok(Assignment { labels, targets, gt_classes })
}

/// Order of detections by descending score, ties by lower index.
pub fn score_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps index order among equal scores
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy per-class non-maximum suppression.
///
/// Output is sorted by descending score with ties broken by input index, and
/// no two kept detections of the same class overlap with IoU above `iou_thr`.
pub fn nms(dets: &[Detection], iou_thr: f64) -> Vec<Detection> {
    let order = score_order(dets.iter().map(|d| d.score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_thr);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn box_rejects_degenerate_and_non_finite() {
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 3.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 2.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::INFINITY, 2.0).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &b(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-12);
        // touching edges do not overlap
        assert_eq!(iou(&a, &b(2.0, 0.0, 4.0, 2.0)), 0.0);
    }

    #[test]
    fn anchor_counts() {
        let cfg = AnchorConfig {
            pyramid_strides: vec![8],
            scales: vec![1.0, 1.5, 2.0],
            aspect_ratios: vec![0.5, 1.0, 2.0],
            base_size: 8.0,
        };
        assert_eq!(generate_anchors(&cfg, 64, 64).unwrap().len(), 576);
        let two = AnchorConfig {
            pyramid_strides: vec![8, 16],
            ..cfg
        };
        assert_eq!(generate_anchors(&two, 64, 64).unwrap().len(), 720);
    }

    #[test]
    fn first_anchor_geometry() {
        let cfg = AnchorConfig {
            pyramid_strides: vec![8],
            scales: vec![1.0],
            aspect_ratios: vec![1.0],
            base_size: 8.0,
        };
        let anchors = generate_anchors(&cfg, 64, 64).unwrap();
        assert_eq!(anchors[0], b(0.0, 0.0, 8.0, 8.0));
        assert_eq!(anchors[0].center(), (4.0, 4.0));
        // row-major: second anchor is the next column
        assert_eq!(anchors[1].center(), (12.0, 4.0));
        assert_eq!(anchors[8].center(), (4.0, 12.0));
    }

    #[test]
    fn anchors_on_padded_grid() {
        let cfg = AnchorConfig {
            pyramid_strides: vec![4, 8],
            scales: vec![1.0],
            aspect_ratios: vec![1.0],
            base_size: 4.0,
        };
        assert_eq!(cfg.padded_size(60, 33), (64, 40));
        assert_eq!(generate_anchors(&cfg, 60, 33).unwrap().len(), 16 * 10 + 8 * 5);
    }

    #[test]
    fn anchor_config_errors() {
        let mut cfg = AnchorConfig::default();
        cfg.scales.clear();
        assert!(generate_anchors(&cfg, 64, 64).is_err());
        let mut cfg = AnchorConfig::default();
        cfg.pyramid_strides = vec![8, 4];
        assert!(cfg.validate().is_err());
        let mut cfg = AnchorConfig::default();
        cfg.aspect_ratios = vec![0.0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn encode_decode_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(encode_box(&a, &a), [0.0; 4]);
        let t = encode_box(&a, &b(0.0, 0.0, 20.0, 20.0));
        let l2 = 2f64.ln();
        for (got, want) in t.iter().zip([0.5, 0.5, l2, l2]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(decode_box(&a, &[0.0; 4], None).unwrap(), a);
        let d = decode_box(&a, &[0.5, 0.5, l2, l2], None).unwrap();
        for (got, want) in d.to_array().iter().zip([0.0, 0.0, 20.0, 20.0]) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn decode_rejects_and_clips() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert!(decode_box(&a, &[0.0, 0.0, 21.0, 0.0], None).is_err());
        assert!(decode_box(&a, &[0.0, f64::NAN, 0.0, 0.0], None).is_err());
        let c = decode_box(&a, &[-0.2, 0.0, 0.0, 0.0], Some((100.0, 100.0))).unwrap();
        assert_eq!(c.x1(), 0.0);
        assert!(decode_box(&a, &[-5.0, 0.0, 0.0, 0.0], Some((100.0, 100.0))).is_err());
    }

    #[test]
    fn assignment_simple_cases() {
        let anchors = vec![b(0.0, 0.0, 10.0, 10.0), b(50.0, 50.0, 60.0, 60.0)];
        let none = assign_anchors(&anchors, &[], 0.5, 0.4).unwrap();
        assert!(none.labels.iter().all(|l| *l == AnchorLabel::Negative));
        let gts = [LabeledBox { bbox: anchors[1], class_id: 2 }];
        let one = assign_anchors(&anchors, &gts, 0.5, 0.4).unwrap();
        assert_eq!(one.labels[1], AnchorLabel::Positive { gt: 0 });
        assert_eq!(one.labels[0], AnchorLabel::Negative);
        assert_eq!(one.positive_class(1), Some(2));
        assert_eq!(one.targets[1], [0.0; 4]);
        assert!(assign_anchors(&anchors, &gts, 0.3, 0.4).is_err());
    }

    #[test]
    fn small_gt_is_force_matched() {
        let anchors = vec![b(0.0, 0.0, 16.0, 16.0), b(16.0, 0.0, 32.0, 16.0)];
        let gts = [LabeledBox { bbox: b(2.0, 2.0, 6.0, 6.0), class_id: 0 }];
        let a = assign_anchors(&anchors, &gts, 0.5, 0.4).unwrap();
        assert_eq!(a.labels[0], AnchorLabel::Positive { gt: 0 });
        assert_eq!(a.labels[1], AnchorLabel::Negative);
    }

    /// Reference assignment written directly from the rule statement.
    pub(crate) fn assign_reference(
        anchors: &[BBox],
        gts: &[LabeledBox],
        pos_thr: f64,
        neg_thr: f64,
    ) -> Vec<AnchorLabel> {
        let overlap = |a: &BBox, g: &BBox| {
            let iw = (a.x2().min(g.x2()) - a.x1().max(g.x1())).max(0.0);
            let ih = (a.y2().min(g.y2()) - a.y1().max(g.y1())).max(0.0);
            let inter = iw * ih;
            inter / (a.area() + g.area() - inter)
        };
        let m: Vec<Vec<f64>> = anchors
            .iter()
            .map(|a| gts.iter().map(|g| overlap(a, &g.bbox)).collect())
            .collect();
        let mut labels: Vec<AnchorLabel> = m
            .iter()
            .map(|row| {
                let best = row.iter().cloned().fold(0.0, f64::max);
                if row.is_empty() || best < neg_thr {
                    AnchorLabel::Negative
                } else if best >= pos_thr {
                    let gi = row.iter().position(|&v| v == best).unwrap();
                    AnchorLabel::Positive { gt: gi }
                } else {
                    AnchorLabel::Ignored
                }
            })
            .collect();
        for ai in 0..anchors.len() {
            // gts whose best anchor (first max) is ai
            let mut winner: Option<(f64, usize)> = None;
            for gi in 0..gts.len() {
                let col: Vec<f64> = m.iter().map(|r| r[gi]).collect();
                let best = col.iter().cloned().fold(0.0, f64::max);
                if best <= 0.0 || col.iter().position(|&v| v == best) != Some(ai) {
                    continue;
                }
                if winner.is_none_or(|(w, _)| best > w) {
                    winner = Some((best, gi));
                }
            }
            if let Some((_, gi)) = winner {
                labels[ai] = AnchorLabel::Positive { gt: gi };
            }
        }
        labels
    }

    #[test]
    fn assignment_matches_reference_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let anchors = random_boxes(&mut rng, 20, 40.0);
            let gts: Vec<LabeledBox> = random_boxes(&mut rng, 3, 40.0)
                .into_iter()
                .map(|bbox| LabeledBox { bbox, class_id: rng.random_range(0..3) })
                .collect();
            let got = assign_anchors(&anchors, &gts, 0.5, 0.4).unwrap();
            assert_eq!(got.labels, assign_reference(&anchors, &gts, 0.5, 0.4));
        }
    }

    pub(crate) fn random_boxes(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<BBox> {
        (0..n)
            .map(|_| {
                let x = rng.random_range(0.0..extent);
                let y = rng.random_range(0.0..extent);
                let w = rng.random_range(2.0..extent / 2.0);
                let h = rng.random_range(2.0..extent / 2.0);
                b(x, y, x + w, y + h)
            })
            .collect()
    }

    /// Reference suppressor: repeatedly take the best remaining detection.
    fn nms_reference(dets: &[Detection], thr: f64) -> Vec<Detection> {
        let mut alive = vec![true; dets.len()];
        let mut out = Vec::new();
        loop {
            let mut best: Option<usize> = None;
            for i in 0..dets.len() {
                if alive[i] && best.is_none_or(|j| dets[i].score > dets[j].score) {
                    best = Some(i);
                }
            }
            let Some(i) = best else { break };
            alive[i] = false;
            out.push(dets[i]);
            for j in 0..dets.len() {
                if alive[j] && dets[j].class_id == dets[i].class_id && iou(&dets[i].bbox, &dets[j].bbox) > thr {
                    alive[j] = false;
                }
            }
        }
        out
    }

    #[test]
    fn nms_examples() {
        let x = b(0.0, 0.0, 10.0, 10.0);
        let d = |bbox, score| Detection { bbox, class_id: 0, score };
        let kept = nms(&[d(x, 0.8), d(x, 0.9)], 0.5);
        assert_eq!(kept, vec![d(x, 0.9)]);
        let far = b(20.0, 20.0, 30.0, 30.0);
        assert_eq!(nms(&[d(x, 0.3), d(far, 0.7)], 0.5).len(), 2);
        // other classes are never suppressed
        let other = Detection { bbox: x, class_id: 1, score: 0.5 };
        assert_eq!(nms(&[d(x, 0.9), other], 0.5).len(), 2);
        // equal scores: lower index wins
        let y = b(0.0, 0.0, 10.0, 11.0);
        assert_eq!(nms(&[d(y, 0.5), d(x, 0.5)], 0.5), vec![d(y, 0.5)]);
    }

    #[test]
    fn nms_matches_reference_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let dets: Vec<Detection> = random_boxes(&mut rng, 30, 50.0)
                .into_iter()
                .map(|bbox| Detection {
                    bbox,
                    class_id: rng.random_range(0..2),
                    score: (rng.random_range(0..20) as f64) / 20.0,
                })
                .collect();
            assert_eq!(nms(&dets, 0.3), nms_reference(&dets, 0.3));
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.5..40.0f64, 0.5..40.0f64)
            .prop_map(|(x, y, w, h)| b(x, y, x + w, y + h))
    }

    fn arb_dets() -> impl Strategy<Value = Vec<Detection>> {
        prop::collection::vec((arb_box(), 0..3usize, 0.0..=1.0f64), 0..25).prop_map(|v| {
            v.into_iter()
                .map(|(bbox, class_id, score)| Detection { bbox, class_id, score })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let x = iou(&a, &c);
            prop_assert_eq!(x, iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&x));
            if x == 1.0 {
                prop_assert!((a.to_array().iter().zip(c.to_array()).all(|(p, q)| (p - q).abs() < 1e-9)));
            }
        }

        #[test]
        fn decode_inverts_encode(a in arb_box(), g in arb_box()) {
            let d = decode_box(&a, &encode_box(&a, &g), None).unwrap();
            for (p, q) in d.to_array().iter().zip(g.to_array()) {
                prop_assert!((p - q).abs() < 1e-9);
            }
        }

        #[test]
        fn nms_output_is_sorted_subset_and_idempotent(dets in arb_dets(), thr in 0.1..0.9f64) {
            let kept = nms(&dets, thr);
            prop_assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));
            prop_assert!(kept.iter().all(|k| dets.contains(k)));
            for (i, p) in kept.iter().enumerate() {
                for q in &kept[i + 1..] {
                    prop_assert!(p.class_id != q.class_id || iou(&p.bbox, &q.bbox) <= thr);
                }
            }
            prop_assert_eq!(nms(&kept, thr), kept);
        }

        #[test]
        fn anchor_count_formula(w in 1usize..100, h in 1usize..100) {
            let cfg = AnchorConfig::default();
            let (pw, ph) = cfg.padded_size(w, h);
            let expected: usize = cfg.pyramid_strides.iter()
                .map(|&s| (pw / s as usize) * (ph / s as usize) * 9)
                .sum();
            prop_assert_eq!(generate_anchors(&cfg, w, h).unwrap().len(), expected);
        }

        #[test]
        fn assignment_is_a_partition(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let anchors = random_boxes(&mut rng, 15, 30.0);
            let gts: Vec<LabeledBox> = random_boxes(&mut rng, 4, 30.0)
                .into_iter().map(|bbox| LabeledBox { bbox, class_id: 0 }).collect();
            let a = assign_anchors(&anchors, &gts, 0.5, 0.4).unwrap();
            prop_assert_eq!(a.labels.len(), anchors.len());
            for (i, l) in a.labels.iter().enumerate() {
                if let AnchorLabel::Positive { gt } = l {
                    prop_assert!(*gt < gts.len());
                } else {
                    prop_assert_eq!(a.targets[i], [0.0; 4]);
                }
            }
        }
    }
}
