//! Reference implementations written directly from the definitions, sharing
//! no code with the library beyond its data types.

#![allow(dead_code)]

use pairdet_core::geometry::{AnchorLabel, BBox, Detection, LabeledBox};

// ---- losses ----

pub const CLAMP: f64 = 1e-7;

pub fn focal(p: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    let p = p.max(CLAMP).min(1.0 - CLAMP);
    let pt = if positive { p } else { 1.0 - p };
    -alpha * (1.0 - pt).powf(gamma) * pt.ln()
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x * x / 2.0
    } else {
        x.abs() - 0.5
    }
}

pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

// ---- geometry on integer-coordinate boxes ----

/// Area of the overlap of two integer boxes by counting unit cells.
pub fn cell_overlap(a: [i32; 4], b: [i32; 4]) -> i64 {
    let mut n = 0;
    for y in a[1]..a[3] {
        for x in a[0]..a[2] {
            if x >= b[0] && x < b[2] && y >= b[1] && y < b[3] {
                n += 1;
            }
        }
    }
    n
}

pub fn cell_area(a: [i32; 4]) -> i64 {
    ((a[2] - a[0]) * (a[3] - a[1])) as i64
}

pub fn iou(a: [i32; 4], b: [i32; 4]) -> f64 {
    let inter = cell_overlap(a, b);
    if inter == 0 {
        return 0.0;
    }
    inter as f64 / (cell_area(a) + cell_area(b) - inter) as f64
}

pub fn to_bbox(a: [i32; 4]) -> BBox {
    BBox::new(a[0] as f64, a[1] as f64, a[2] as f64, a[3] as f64).unwrap()
}

/// Indices sorted by score descending, then by index.
pub fn rank(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    for i in 0..idx.len() {
        for j in i + 1..idx.len() {
            let (a, b) = (idx[i], idx[j]);
            if scores[b] > scores[a] || (scores[b] == scores[a] && b < a) {
                idx.swap(i, j);
            }
        }
    }
    idx
}

/// Per-class suppression: repeatedly take the best remaining detection of a
/// class and drop everything overlapping it by more than `thr`; then merge
/// the kept sets in rank order.
pub fn nms(boxes: &[[i32; 4]], classes: &[usize], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut kept = Vec::new();
    let mut class_ids: Vec<usize> = classes.to_vec();
    class_ids.sort();
    class_ids.dedup();
    for c in class_ids {
        let mut remaining: Vec<usize> = rank(scores).into_iter().filter(|&i| classes[i] == c).collect();
        while !remaining.is_empty() {
            let best = remaining.remove(0);
            kept.push(best);
            remaining.retain(|&i| iou(boxes[best], boxes[i]) <= thr);
        }
    }
    let order = rank(scores);
    order.into_iter().filter(|i| kept.contains(i)).collect()
}

pub struct OracleAssignment {
    pub labels: Vec<AnchorLabel>,
}

pub fn assign(anchors: &[[i32; 4]], gts: &[[i32; 4]], pos: f64, neg: f64) -> OracleAssignment {
    let m: Vec<Vec<f64>> = anchors.iter().map(|&a| gts.iter().map(|&g| iou(a, g)).collect()).collect();
    let mut labels = Vec::new();
    for row in &m {
        let mut best_g = None;
        let mut best = 0.0;
        for (g, &v) in row.iter().enumerate() {
            if v > best {
                best = v;
                best_g = Some(g);
            }
        }
        labels.push(match best_g {
            Some(g) if best >= pos => AnchorLabel::Positive { gt: g },
            _ if best < neg => AnchorLabel::Negative,
            _ => AnchorLabel::Ignored,
        });
    }
    // force matches: each gt with any overlap claims its first best anchor
    let mut claim: Vec<Option<(usize, f64)>> = vec![None; anchors.len()];
    for g in 0..gts.len() {
        let col: Vec<f64> = m.iter().map(|r| r[g]).collect();
        let top = col.iter().cloned().fold(0.0, f64::max);
        if top == 0.0 {
            continue;
        }
        let a = col.iter().position(|&v| v == top).unwrap();
        let better = match claim[a] {
            None => true,
            Some((other, v)) => top > v || (top == v && g < other),
        };
        if better {
            claim[a] = Some((g, top));
        }
    }
    for (a, c) in claim.iter().enumerate() {
        if let Some((g, _)) = c {
            labels[a] = AnchorLabel::Positive { gt: *g };
        }
    }
    OracleAssignment { labels }
}

pub fn encode(anchor: [i32; 4], gt: [i32; 4]) -> [f64; 4] {
    let f = |v: [i32; 4]| {
        let [x1, y1, x2, y2] = v.map(f64::from);
        ((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    };
    let (ax, ay, aw, ah) = f(anchor);
    let (gx, gy, gw, gh) = f(gt);
    [(gx - ax) / aw, (gy - ay) / ah, (gw / aw).ln(), (gh / ah).ln()]
}

/// Greedy matching: detections in rank order take the unmatched gt with the
/// highest IoU (first on ties) when it reaches `thr`.
pub fn match_dets(dets: &[[i32; 4]], scores: &[f64], gts: &[[i32; 4]], thr: f64) -> Vec<Option<usize>> {
    let mut out = vec![None; dets.len()];
    let mut taken = vec![false; gts.len()];
    for d in rank(scores) {
        let mut pick: Option<usize> = None;
        for g in 0..gts.len() {
            let v = iou(dets[d], gts[g]);
            if taken[g] || v < thr {
                continue;
            }
            if pick.is_none_or(|p| v > iou(dets[d], gts[p])) {
                pick = Some(g);
            }
        }
        if let Some(g) = pick {
            taken[g] = true;
            out[d] = Some(g);
        }
    }
    out
}

pub fn detection(b: [i32; 4], class_id: usize, score: f64) -> Detection {
    Detection {
        bbox: to_bbox(b),
        class_id,
        score,
    }
}

pub fn labeled(b: [i32; 4], class_id: usize) -> LabeledBox {
    LabeledBox {
        bbox: to_bbox(b),
        class_id,
    }
}

// ---- statistics ----

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
