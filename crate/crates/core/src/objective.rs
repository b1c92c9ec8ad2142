//! Matched multi-task loss: `L_m + α·L_b + λ·L_c + γ·L_s`.
//!
//! Predictions are paired with ground truths once per forward pass by a
//! minimum soft-IoU assignment; the assignment is a constant for the
//! gradient. Unmatched predictions only see the stop term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hungarian::hungarian_match;
use crate::types::{AssignmentMatrix, BinaryMask, GroundTruthInstance, PredictionSequence, SoftMask};

/// Clamp for logarithms and the soft-IoU denominator.
pub const EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveTerms {
    pub mask: bool,
    pub bbox: bool,
    pub class: bool,
    pub stop: bool,
}

impl ActiveTerms {
    pub const ALL: ActiveTerms = ActiveTerms {
        mask: true,
        bbox: true,
        class: true,
        stop: true,
    };

    pub fn names(&self) -> Vec<&'static str> {
        [
            (self.mask, "mask"),
            (self.stop, "stop"),
            (self.class, "class"),
            (self.bbox, "box"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub active: ActiveTerms,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            lambda: 1.0,
            gamma: 1.0,
            active: ActiveTerms::ALL,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.lambda, self.gamma].iter().any(|w| w.is_nan() || *w < 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub l_m: f64,
    pub l_b: f64,
    pub l_c: f64,
    pub l_s: f64,
    pub total: f64,
    /// `None` when the image has no ground truth.
    pub assignment: Option<AssignmentMatrix>,
}

impl LossBreakdown {
    /// First term that is NaN or infinite, if any.
    pub fn non_finite(&self) -> Option<(&'static str, f64)> {
        [
            ("mask", self.l_m),
            ("box", self.l_b),
            ("class", self.l_c),
            ("stop", self.l_s),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
    }
}

/// Gradient of the total loss w.r.t. one step's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGrad {
    pub mask: Vec<f64>,
    pub bbox: [f64; 4],
    pub class_probs: Vec<f64>,
    pub stop: f64,
}

/// `1 − ⟨p,y⟩ / (‖p‖₁ + ‖y‖₁ − ⟨p,y⟩)`; 0 when both masks are empty.
pub fn soft_iou_loss(pred: &SoftMask, gt: &BinaryMask) -> f64 {
    soft_iou_terms(pred, gt).0
}

/// Loss value plus `(intersection, union)`.
fn soft_iou_terms(pred: &SoftMask, gt: &BinaryMask) -> (f64, f64, f64) {
    debug_assert!(pred.same_shape(gt));
    let (mut inter, mut sum_p, mut sum_y) = (0.0, 0.0, 0.0);
    for (&p, &y) in pred.data.iter().zip(&gt.data) {
        sum_p += p;
        if y {
            inter += p;
            sum_y += 1.0;
        }
    }
    let union = sum_p + sum_y - inter;
    if union < EPS {
        return (0.0, inter, union);
    }
    (1.0 - inter / union, inter, union)
}

/// Adds `scale · d sIoU / d pred` into `out`.
fn soft_iou_grad(pred: &SoftMask, gt: &BinaryMask, scale: f64, out: &mut [f64]) {
    let (_, inter, union) = soft_iou_terms(pred, gt);
    if union < EPS {
        return;
    }
    let u2 = union * union;
    // d(I/U)/dp_j = (y_j·U − I·(1 − y_j)) / U²
    let on = -scale * union / u2;
    let off = scale * inter / u2;
    for (o, &y) in out.iter_mut().zip(&gt.data) {
        *o += if y { on } else { off };
    }
}

/// `cost[t][k]` = soft-IoU loss between prediction `t` and ground truth `k`.
pub fn cost_matrix(preds: &PredictionSequence, gts: &[GroundTruthInstance]) -> Vec<Vec<f64>> {
    preds
        .steps
        .iter()
        .map(|p| gts.iter().map(|g| soft_iou_loss(&p.mask, &g.mask)).collect())
        .collect()
}

/// Sum of matched soft-IoU losses.
pub fn mask_loss(
    preds: &PredictionSequence,
    gts: &[GroundTruthInstance],
    delta: &AssignmentMatrix,
) -> f64 {
    delta
        .pairs()
        .iter()
        .map(|&(t, k)| soft_iou_loss(&preds.steps[t].mask, &gts[k].mask))
        .sum()
}

/// Mean over matched pairs of `−ln p[class]`.
pub fn class_loss(
    preds: &PredictionSequence,
    gts: &[GroundTruthInstance],
    delta: &AssignmentMatrix,
) -> f64 {
    let pairs = delta.pairs();
    if pairs.is_empty() {
        return 0.0;
    }
    let sum: f64 = pairs
        .iter()
        .map(|&(t, k)| -preds.steps[t].class_probs[gts[k].class_id].max(EPS).ln())
        .sum();
    sum / pairs.len() as f64
}

/// Mean over matched pairs and the 4 coordinates of squared differences.
pub fn box_loss(
    preds: &PredictionSequence,
    gts: &[GroundTruthInstance],
    delta: &AssignmentMatrix,
) -> f64 {
    let pairs = delta.pairs();
    if pairs.is_empty() {
        return 0.0;
    }
    let sum: f64 = pairs
        .iter()
        .map(|&(t, k)| {
            let (p, g) = (preds.steps[t].bbox.0, gts[k].bbox.0);
            (0..4).map(|i| (p[i] - g[i]).powi(2)).sum::<f64>()
        })
        .sum();
    sum / (4 * pairs.len()) as f64
}

/// Stop targets: 1 for the first `n` steps, 0 afterwards.
pub fn stop_targets(steps: usize, n: usize) -> Vec<f64> {
    (0..steps).map(|t| if t < n { 1.0 } else { 0.0 }).collect()
}

/// Mean binary cross entropy of the stop scores against [`stop_targets`].
pub fn stop_loss(scores: &[f64], n: usize) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let targets = stop_targets(scores.len(), n);
    let sum: f64 = scores
        .iter()
        .zip(&targets)
        .map(|(&s, &y)| -(y * s.max(EPS).ln() + (1.0 - y) * (1.0 - s).max(EPS).ln()))
        .sum();
    sum / scores.len() as f64
}

/// Runs the matching once and evaluates every term against it. Terms that
/// are not active are still reported but do not enter `total`.
pub fn total_loss(
    preds: &PredictionSequence,
    gts: &[GroundTruthInstance],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    evaluate(preds, gts, weights, false).map(|(b, _)| b)
}

/// [`total_loss`] plus its gradient w.r.t. every step's outputs, with the
/// assignment held fixed.
pub fn total_loss_with_grad(
    preds: &PredictionSequence,
    gts: &[GroundTruthInstance],
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<StepGrad>)> {
    evaluate(preds, gts, weights, true)
}

fn evaluate(
    preds: &PredictionSequence,
    gts: &[GroundTruthInstance],
    weights: &LossWeights,
    want_grad: bool,
) -> Result<(LossBreakdown, Vec<StepGrad>)> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("loss needs at least one prediction".into()));
    }
    let n_hat = preds.len();
    let n = gts.len();
    let active = weights.active;

    let mut grads: Vec<StepGrad> = if want_grad {
        preds
            .steps
            .iter()
            .map(|p| StepGrad {
                mask: vec![0.0; p.mask.data.len()],
                bbox: [0.0; 4],
                class_probs: vec![0.0; p.class_probs.len()],
                stop: 0.0,
            })
            .collect()
    } else {
        Vec::new()
    };

    let scores = preds.stop_scores();
    let l_s = stop_loss(&scores, n);
    if want_grad && active.stop {
        let targets = stop_targets(n_hat, n);
        for (g, (&s, &y)) in grads.iter_mut().zip(scores.iter().zip(&targets)) {
            let mut d = 0.0;
            if y > 0.0 && s > EPS {
                d -= y / s;
            }
            if y < 1.0 && 1.0 - s > EPS {
                d += (1.0 - y) / (1.0 - s);
            }
            g.stop = weights.gamma * d / n_hat as f64;
        }
    }

    if n == 0 {
        let total = if active.stop { weights.gamma * l_s } else { 0.0 };
        return Ok((
            LossBreakdown {
                l_m: 0.0,
                l_b: 0.0,
                l_c: 0.0,
                l_s,
                total,
                assignment: None,
            },
            grads,
        ));
    }

    let cost = cost_matrix(preds, gts);
    let delta = hungarian_match(&cost)?;
    let pairs = delta.pairs();
    let l_m: f64 = pairs.iter().map(|&(t, k)| cost[t][k]).sum();
    let l_c = class_loss(preds, gts, &delta);
    let l_b = box_loss(preds, gts, &delta);

    if want_grad {
        let m = pairs.len() as f64;
        for &(t, k) in &pairs {
            let (p, gt) = (&preds.steps[t], &gts[k]);
            let g = &mut grads[t];
            if active.mask {
                soft_iou_grad(&p.mask, &gt.mask, 1.0, &mut g.mask);
            }
            if active.class {
                let prob = p.class_probs[gt.class_id];
                if prob > EPS {
                    g.class_probs[gt.class_id] = -weights.lambda / (prob * m);
                }
            }
            if active.bbox {
                for i in 0..4 {
                    g.bbox[i] = weights.alpha * 2.0 * (p.bbox.0[i] - gt.bbox.0[i]) / (4.0 * m);
                }
            }
        }
    }

    let mut total = 0.0;
    if active.mask {
        total += l_m;
    }
    if active.bbox {
        total += weights.alpha * l_b;
    }
    if active.class {
        total += weights.lambda * l_c;
    }
    if active.stop {
        total += weights.gamma * l_s;
    }
    Ok((
        LossBreakdown {
            l_m,
            l_b,
            l_c,
            l_s,
            total,
            assignment: Some(delta),
        },
        grads,
    ))
}
