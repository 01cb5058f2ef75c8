//! Greedy IoU matching, precision/recall curves, all-points AP and mAP.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, score_order, BBox, Detection};
use crate::synthdata::{GroundTruth, ScenarioTag};

pub const STRICT_IOU: f64 = 0.7;
pub const LOOSE_IOU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("class id {class_id} outside the {num_classes}-class universe")]
    UnknownClass { class_id: usize, num_classes: usize },
    #[error("iou threshold {0} outside (0, 1)")]
    InvalidThreshold(f64),
    #[error("{dets} detection frames but {gts} ground-truth frames")]
    FrameCountMismatch { dets: usize, gts: usize },
    #[error("writing report to {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Scenario tags to re-evaluate on; empty disables stratification.
    #[serde(default)]
    pub strata: Vec<ScenarioTag>,
}

impl EvalConfig {
    pub fn new(iou_threshold: f64) -> Result<Self, EvalError> {
        let c = Self {
            iou_threshold,
            strata: Vec::new(),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn strict() -> Self {
        Self::new(STRICT_IOU).expect("valid preset")
    }

    pub fn loose() -> Self {
        Self::new(LOOSE_IOU).expect("valid preset")
    }

    pub fn with_strata(mut self, strata: &[ScenarioTag]) -> Self {
        self.strata = strata.to_vec();
        self
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(EvalError::InvalidThreshold(self.iou_threshold));
        }
        Ok(())
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self::loose()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// Per detection, in input order.
    pub is_tp: Vec<bool>,
    /// Per detection, the matched gt index.
    pub matched_gt: Vec<Option<usize>>,
    /// Per ground truth.
    pub gt_matched: Vec<bool>,
}

/// Detections in descending score order (ties by index) each claim the
/// highest-IoU still unmatched gt (ties by gt index) if that IoU reaches
/// `iou_thr`. All inputs belong to one class of one frame.
pub fn match_detections(dets: &[Detection], gts: &[BBox], iou_thr: f64) -> MatchResult {
    let mut res = MatchResult {
        is_tp: vec![false; dets.len()],
        matched_gt: vec![None; dets.len()],
        gt_matched: vec![false; gts.len()],
    };
    for d in score_order(dets.iter().map(|d| d.score)) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if res.gt_matched[g] {
                continue;
            }
            let v = iou(&dets[d].bbox, gt);
            if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            res.is_tp[d] = true;
            res.matched_gt[d] = Some(g);
            res.gt_matched[g] = true;
        }
    }
    res
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Cumulative precision and recall after each detection. `flags` must be in
/// score order. With no ground truth recall is reported as 0.
pub fn pr_curve(flags: &[bool], num_gts: usize) -> Vec<PrPoint> {
    let mut tp = 0usize;
    flags
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            tp += f as usize;
            PrPoint {
                recall: if num_gts == 0 { 0.0 } else { tp as f64 / num_gts as f64 },
                precision: tp as f64 / (i + 1) as f64,
            }
        })
        .collect()
}

/// Exact area under the precision envelope (precision made non-increasing
/// from the right).
pub fn average_precision(points: &[PrPoint]) -> f64 {
    let mut envelope: Vec<f64> = points.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for (p, env) in points.iter().zip(&envelope) {
        area += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    area.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub ap: f64,
    pub num_gts: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub pr: Vec<PrPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumReport {
    pub tag: ScenarioTag,
    pub num_gts: usize,
    /// `None` for classes without gts in the stratum.
    pub class_ap: Vec<Option<f64>>,
    /// `None` when the stratum is empty.
    pub map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub classes: Vec<ClassReport>,
    pub map: f64,
    pub strata: Vec<StratumReport>,
}

impl EvalReport {
    pub fn stratum(&self, tag: ScenarioTag) -> Option<&StratumReport> {
        self.strata.iter().find(|s| s.tag == tag)
    }
}

fn mean_present(aps: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = aps.flatten().fold((0.0, 0usize), |(s, n), a| (s + a, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// One pooled detection: (score, frame, index within frame).
#[derive(Clone, Copy)]
struct Pooled {
    score: f64,
    frame: usize,
    index: usize,
}

/// Detections are matched frame by frame against every gt of their class,
/// then pooled across frames in descending score order (ties by frame, then
/// index). A stratum keeps all false positives and only the true positives
/// whose gt carries the tag; its recall counts only tagged gts.
pub fn evaluate(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    num_classes: usize,
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    config.validate()?;
    if dets.len() != gts.len() {
        return Err(EvalError::FrameCountMismatch {
            dets: dets.len(),
            gts: gts.len(),
        });
    }
    let check = |class_id: usize| {
        if class_id >= num_classes {
            Err(EvalError::UnknownClass { class_id, num_classes })
        } else {
            Ok(())
        }
    };
    for d in dets.iter().flatten() {
        check(d.class_id)?;
    }
    for g in gts.iter().flatten() {
        check(g.class_id)?;
    }

    // per class: pooled detections with the tags of their matched gt
    let mut pooled: Vec<Vec<(Pooled, Option<&[ScenarioTag]>)>> = vec![Vec::new(); num_classes];
    let mut num_gts = vec![0usize; num_classes];
    let mut stratum_gts = vec![vec![0usize; num_classes]; config.strata.len()];
    for (frame, (fd, fg)) in dets.iter().zip(gts).enumerate() {
        for k in 0..num_classes {
            let idx: Vec<usize> = (0..fd.len()).filter(|&i| fd[i].class_id == k).collect();
            let g: Vec<&GroundTruth> = fg.iter().filter(|g| g.class_id == k).collect();
            num_gts[k] += g.len();
            for (s, tag) in config.strata.iter().enumerate() {
                stratum_gts[s][k] += g.iter().filter(|g| g.has_tag(*tag)).count();
            }
            let cls_dets: Vec<Detection> = idx.iter().map(|&i| fd[i]).collect();
            let boxes: Vec<BBox> = g.iter().map(|g| g.bbox).collect();
            let m = match_detections(&cls_dets, &boxes, config.iou_threshold);
            for (j, &i) in idx.iter().enumerate() {
                let entry = Pooled {
                    score: fd[i].score,
                    frame,
                    index: i,
                };
                pooled[k].push((entry, m.matched_gt[j].map(|gi| g[gi].tags.as_slice())));
            }
        }
    }
    for list in &mut pooled {
        list.sort_by(|(a, _), (b, _)| {
            b.score
                .total_cmp(&a.score)
                .then(a.frame.cmp(&b.frame))
                .then(a.index.cmp(&b.index))
        });
    }

    let mut classes = Vec::with_capacity(num_classes);
    for k in 0..num_classes {
        let flags: Vec<bool> = pooled[k].iter().map(|(_, m)| m.is_some()).collect();
        let pr = pr_curve(&flags, num_gts[k]);
        let tp = flags.iter().filter(|&&f| f).count();
        classes.push(ClassReport {
            class_id: k,
            ap: if num_gts[k] == 0 { 0.0 } else { average_precision(&pr) },
            num_gts: num_gts[k],
            tp,
            fp: flags.len() - tp,
            fn_: num_gts[k] - tp,
            pr,
        });
    }
    let map = mean_present(classes.iter().map(|c| (c.num_gts > 0).then_some(c.ap))).unwrap_or(0.0);

    let strata = config
        .strata
        .iter()
        .enumerate()
        .map(|(s, tag)| {
            let class_ap: Vec<Option<f64>> = (0..num_classes)
                .map(|k| {
                    let n = stratum_gts[s][k];
                    if n == 0 {
                        return None;
                    }
                    let flags: Vec<bool> = pooled[k]
                        .iter()
                        .filter_map(|(_, m)| match m {
                            None => Some(false),
                            Some(tags) if tags.contains(tag) => Some(true),
                            Some(_) => None,
                        })
                        .collect();
                    Some(average_precision(&pr_curve(&flags, n)))
                })
                .collect();
            StratumReport {
                tag: *tag,
                num_gts: stratum_gts[s].iter().sum(),
                map: mean_present(class_ap.iter().copied()),
                class_ap,
            }
        })
        .collect();

    Ok(EvalReport {
        iou_threshold: config.iou_threshold,
        classes,
        map,
        strata,
    })
}

fn class_name(names: &[String], k: usize) -> String {
    names.get(k).cloned().unwrap_or_else(|| format!("class{k}"))
}

pub fn per_class_csv(report: &EvalReport, names: &[String]) -> String {
    let mut s = String::from("class_id,class,ap,num_gts,tp,fp,fn\n");
    for c in &report.classes {
        let _ = writeln!(
            s,
            "{},{},{:.6},{},{},{},{}",
            c.class_id,
            class_name(names, c.class_id),
            c.ap,
            c.num_gts,
            c.tp,
            c.fp,
            c.fn_
        );
    }
    s
}

pub fn pr_curves_csv(report: &EvalReport, names: &[String]) -> String {
    let mut s = String::from("class_id,class,rank,recall,precision\n");
    for c in &report.classes {
        for (i, p) in c.pr.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6}",
                c.class_id,
                class_name(names, c.class_id),
                i + 1,
                p.recall,
                p.precision
            );
        }
    }
    s
}

pub fn strata_csv(report: &EvalReport) -> String {
    let mut s = String::from("stratum,num_gts,map\n");
    for st in &report.strata {
        let map = st.map.map(|m| format!("{m:.6}")).unwrap_or_default();
        let _ = writeln!(s, "{},{},{}", st.tag.name(), st.num_gts, map);
    }
    s
}

/// Writes `report.json`, `per_class.csv`, `pr_curves.csv` and `strata.csv`.
pub fn write_report(report: &EvalReport, names: &[String], dir: &Path) -> Result<(), EvalError> {
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |source| EvalError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    for (file, body) in [
        ("report.json", json),
        ("per_class.csv", per_class_csv(report, names)),
        ("pr_curves.csv", pr_curves_csv(report, names)),
        ("strata.csv", strata_csv(report)),
    ] {
        let p = dir.join(file);
        fs::write(&p, body).map_err(io(&p))?;
    }
    Ok(())
}
