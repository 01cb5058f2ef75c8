//! Focal classification loss, smooth L1 regression loss and their sum over
//! an anchor assignment.
//!
//! The focal loss for one binary decision is
//! `-alpha_t * (1 - p')^gamma * ln(p')` where `p'` is the predicted probability
//! of the true outcome: `p` for a positive label and `1 - p` otherwise.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{AnchorLabel, Assignment};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("probability {0} is outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("class id {class_id} has no alpha weight ({num_classes} classes)")]
    UnknownClass { class_id: usize, num_classes: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid focal parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    /// Weight of a positive (foreground) decision, per class.
    pub alpha: Vec<f64>,
    /// Weight of every background decision.
    pub background_alpha: f64,
}

impl FocalParams {
    pub fn new(gamma: f64, alpha: Vec<f64>) -> Result<Self, LossError> {
        let p = Self {
            gamma,
            alpha,
            background_alpha: 1.0,
        };
        p.validate()?;
        Ok(p)
    }

    /// `num_classes` classes all weighted 1.
    pub fn uniform(gamma: f64, num_classes: usize) -> Self {
        Self {
            gamma,
            alpha: vec![1.0; num_classes],
            background_alpha: 1.0,
        }
    }

    /// Inverse class frequency, rescaled so the mean weight is 1.
    /// Classes never seen are counted once.
    pub fn from_class_counts(gamma: f64, counts: &[usize]) -> Result<Self, LossError> {
        if counts.is_empty() {
            return Err(LossError::InvalidParams("no classes".into()));
        }
        let inv: Vec<f64> = counts.iter().map(|&n| 1.0 / n.max(1) as f64).collect();
        let mean = inv.iter().sum::<f64>() / inv.len() as f64;
        Self::new(gamma, inv.into_iter().map(|a| a / mean).collect())
    }

    pub fn num_classes(&self) -> usize {
        self.alpha.len()
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(LossError::InvalidParams(format!("gamma {} must be >= 0", self.gamma)));
        }
        let ok = |a: &f64| a.is_finite() && *a > 0.0;
        if !self.alpha.iter().all(ok) || !ok(&self.background_alpha) {
            return Err(LossError::InvalidParams("alpha weights must be positive".into()));
        }
        Ok(())
    }

    fn alpha_t(&self, positive: bool, class_id: usize) -> Result<f64, LossError> {
        if positive {
            self.alpha.get(class_id).copied().ok_or(LossError::UnknownClass {
                class_id,
                num_classes: self.alpha.len(),
            })
        } else {
            Ok(self.background_alpha)
        }
    }
}

fn check_prob(p: f64) -> Result<(), LossError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(LossError::ProbabilityOutOfRange(p))
    }
}

#[inline]
fn true_outcome_prob(p: f64, positive: bool) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if positive {
        p
    } else {
        1.0 - p
    }
}

#[inline]
fn focal_value(p: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    let pt = true_outcome_prob(p, positive);
    -alpha * (1.0 - pt).powf(gamma) * pt.ln()
}

/// d(loss)/dp, with the clamp treated as the identity.
#[inline]
fn focal_derivative(p: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    let pt = true_outcome_prob(p, positive);
    let q = 1.0 - pt;
    let mut d_pt = -q.powf(gamma) / pt;
    if gamma != 0.0 {
        d_pt += gamma * q.powf(gamma - 1.0) * pt.ln();
    }
    let d_pt = alpha * d_pt;
    if positive {
        d_pt
    } else {
        -d_pt
    }
}

/// Focal loss of predicted foreground probability `p` for `class_id` with
/// label `positive`.
pub fn focal_loss(p: f64, positive: bool, params: &FocalParams, class_id: usize) -> Result<f64, LossError> {
    check_prob(p)?;
    let alpha = params.alpha_t(positive, class_id)?;
    Ok(focal_value(p, positive, alpha, params.gamma))
}

/// Analytic derivative of [`focal_loss`] with respect to `p`.
pub fn focal_loss_grad(p: f64, positive: bool, params: &FocalParams, class_id: usize) -> Result<f64, LossError> {
    check_prob(p)?;
    let alpha = params.alpha_t(positive, class_id)?;
    Ok(focal_derivative(p, positive, alpha, params.gamma))
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub classification: f64,
    pub regression: f64,
    /// `classification + lambda * regression`
    pub total: f64,
    pub lambda: f64,
}

/// Loss together with its gradient with respect to the inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWithGrad {
    pub value: LossValue,
    /// d(total)/d(cls_probs), same layout as the probabilities.
    pub cls_grad: Vec<f64>,
    /// d(total)/d(reg_preds).
    pub reg_grad: Vec<[f64; 4]>,
}

fn check_shapes(
    cls_probs: &[f64],
    reg_preds: &[[f64; 4]],
    assignment: &Assignment,
    params: &FocalParams,
) -> Result<usize, LossError> {
    let n = assignment.labels.len();
    let k = params.num_classes();
    if cls_probs.len() != n * k {
        return Err(LossError::ShapeMismatch(format!(
            "{} class probabilities for {n} anchors x {k} classes",
            cls_probs.len()
        )));
    }
    if reg_preds.len() != n || assignment.targets.len() != n {
        return Err(LossError::ShapeMismatch(format!(
            "{} regression predictions for {n} anchors",
            reg_preds.len()
        )));
    }
    for &c in &assignment.gt_classes {
        if c >= k {
            return Err(LossError::UnknownClass { class_id: c, num_classes: k });
        }
    }
    Ok(k)
}

/// Detection loss over an anchor assignment.
///
/// `cls_probs` is anchor-major: entry `anchor * K + class`. Classification sums
/// the focal loss over every non-ignored anchor and class; regression sums
/// smooth L1 over positive anchors. Both are divided by `max(1, #positives)`.
pub fn detection_loss(
    cls_probs: &[f64],
    reg_preds: &[[f64; 4]],
    assignment: &Assignment,
    params: &FocalParams,
    lambda: f64,
) -> Result<LossValue, LossError> {
    detection_loss_impl(cls_probs, reg_preds, assignment, params, lambda, false).map(|l| l.value)
}

/// [`detection_loss`] plus gradients with respect to both prediction arrays.
pub fn detection_loss_with_grad(
    cls_probs: &[f64],
    reg_preds: &[[f64; 4]],
    assignment: &Assignment,
    params: &FocalParams,
    lambda: f64,
) -> Result<LossWithGrad, LossError> {
    detection_loss_impl(cls_probs, reg_preds, assignment, params, lambda, true)
}

fn detection_loss_impl(
    cls_probs: &[f64],
    reg_preds: &[[f64; 4]],
    assignment: &Assignment,
    params: &FocalParams,
    lambda: f64,
    want_grad: bool,
) -> Result<LossWithGrad, LossError> {
    params.validate()?;
    let k = check_shapes(cls_probs, reg_preds, assignment, params)?;
    if let Some(&p) = cls_probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(LossError::ProbabilityOutOfRange(p));
    }
    let norm = assignment.num_positive().max(1) as f64;
    let gamma = params.gamma;
    let (mut cls_grad, mut reg_grad) = if want_grad {
        (vec![0.0; cls_probs.len()], vec![[0.0; 4]; reg_preds.len()])
    } else {
        (Vec::new(), Vec::new())
    };

    let mut cls_sum = 0.0;
    let mut reg_sum = 0.0;
    for (i, label) in assignment.labels.iter().enumerate() {
        let positive_class = match *label {
            AnchorLabel::Ignored => continue,
            AnchorLabel::Negative => None,
            AnchorLabel::Positive { gt } => Some(assignment.gt_classes[gt]),
        };
        let row = &cls_probs[i * k..(i + 1) * k];
        for (c, &p) in row.iter().enumerate() {
            let positive = positive_class == Some(c);
            let alpha = if positive { params.alpha[c] } else { params.background_alpha };
            cls_sum += focal_value(p, positive, alpha, gamma);
            if want_grad {
                cls_grad[i * k + c] = focal_derivative(p, positive, alpha, gamma) / norm;
            }
        }
        if positive_class.is_some() {
            let target = &assignment.targets[i];
            for j in 0..4 {
                let x = reg_preds[i][j] - target[j];
                reg_sum += smooth_l1(x);
                if want_grad {
                    reg_grad[i][j] = lambda * smooth_l1_grad(x) / norm;
                }
            }
        }
    }
    let classification = cls_sum / norm;
    let regression = reg_sum / norm;
    Ok(LossWithGrad {
        value: LossValue {
            classification,
            regression,
            total: classification + lambda * regression,
            lambda,
        },
        cls_grad,
        reg_grad,
    })
}
