//! Set-based detection loss: sigmoid focal classification, L1 and
//! generalized-IoU box regression, paired through an optimal assignment.
//! The assignment is recomputed per call and treated as a constant during
//! differentiation.

use crate::boxes::{giou_with_grad, BoxN};
use crate::matching::{hungarian_match, Assignment};
use crate::Result;

/// Loss weights and focal parameters.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

/// log(sigmoid(x)), stable for large |x|.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(1.0 + (-x).exp()).ln()
    } else {
        x - (1.0 + x.exp()).ln()
    }
}

/// Sigmoid focal loss for one logit. `target` marks the positive class.
pub fn focal_loss(x: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
    let p = crate::kernels::sigmoid(x);
    if target {
        -alpha * (1.0 - p).powf(gamma) * log_sigmoid(x)
    } else {
        -(1.0 - alpha) * p.powf(gamma) * log_sigmoid(-x)
    }
}

/// d focal / d logit.
pub fn focal_loss_grad(x: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
    let p = crate::kernels::sigmoid(x);
    if target {
        alpha * gamma * p * (1.0 - p).powf(gamma) * log_sigmoid(x)
            - alpha * (1.0 - p).powf(gamma + 1.0)
    } else {
        (1.0 - alpha) * p.powf(gamma + 1.0)
            - (1.0 - alpha) * gamma * (1.0 - p) * p.powf(gamma) * log_sigmoid(-x)
    }
}

/// Per-component values of one set-loss evaluation.
#[derive(Debug, Clone, Default)]
pub struct LossParts {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
}

impl LossParts {
    pub fn add(&mut self, o: &LossParts) {
        self.class += o.class;
        self.l1 += o.l1;
        self.giou += o.giou;
        self.total += o.total;
    }
}

/// Result of [`set_loss`]: scalar parts, the assignment used, and gradients
/// w.r.t. the class logits `[n_queries, n_classes]` and decoded boxes
/// `[n_queries, 4]`.
#[derive(Debug, Clone)]
pub struct SetLossOutput {
    pub parts: LossParts,
    pub assignment: Assignment,
    pub grad_logits: Vec<f64>,
    pub grad_boxes: Vec<f64>,
}

/// Matching cost between one query and one ground-truth object. The class
/// term is the focal-style margin (positive-cost minus negative-cost at the
/// target class); box terms are L1 and negative generalized IoU.
fn pair_cost(
    logits: &[f64],
    pred_box: BoxN,
    gt_class: usize,
    gt_box: BoxN,
    w: &LossWeights,
) -> f64 {
    let x = logits[gt_class];
    let p = crate::kernels::sigmoid(x);
    let pos = -w.focal_alpha * (1.0 - p).powf(w.focal_gamma) * log_sigmoid(x);
    let neg = -(1.0 - w.focal_alpha) * p.powf(w.focal_gamma) * log_sigmoid(-x);
    let class_cost = pos - neg;
    let l1: f64 = pred_box
        .to_array()
        .iter()
        .zip(gt_box.to_array())
        .map(|(a, b)| (a - b).abs())
        .sum();
    let (g, _) = giou_with_grad(pred_box, gt_box);
    w.class * class_cost + w.l1 * l1 + w.giou * (-g)
}

/// Full set loss for one image and one prediction layer.
///
/// * `logits`: `[n_queries, n_classes]` row-major.
/// * `boxes`: `[n_queries, 4]` normalized `(cx, cy, w, h)`.
/// * `gt_classes` / `gt_boxes`: ground truth (`gt_boxes` is `[n_gt, 4]`).
///
/// Every query is supervised for classification (matched queries toward
/// their object's class, the rest toward background); box terms apply to
/// matched pairs only. All terms are normalized by `max(n_gt, 1)`.
pub fn set_loss(
    logits: &[f64],
    boxes: &[f64],
    n_queries: usize,
    n_classes: usize,
    gt_classes: &[usize],
    gt_boxes: &[f64],
    w: &LossWeights,
) -> Result<SetLossOutput> {
    let n_gt = gt_classes.len();
    assert_eq!(logits.len(), n_queries * n_classes);
    assert_eq!(boxes.len(), n_queries * 4);
    assert_eq!(gt_boxes.len(), n_gt * 4);

    let mut cost = vec![0.0; n_queries * n_gt];
    for q in 0..n_queries {
        let ql = &logits[q * n_classes..(q + 1) * n_classes];
        let qb = BoxN::from_slice(&boxes[q * 4..q * 4 + 4]);
        for g in 0..n_gt {
            cost[q * n_gt + g] = pair_cost(
                ql,
                qb,
                gt_classes[g],
                BoxN::from_slice(&gt_boxes[g * 4..g * 4 + 4]),
                w,
            );
        }
    }
    let assignment = hungarian_match(&cost, n_queries, n_gt)?;

    let norm = n_gt.max(1) as f64;
    let mut target = vec![usize::MAX; n_queries]; // MAX = background
    for &(q, g) in &assignment.pairs {
        target[q] = gt_classes[g];
    }

    let mut parts = LossParts::default();
    let mut grad_logits = vec![0.0; logits.len()];
    let mut grad_boxes = vec![0.0; boxes.len()];

    for q in 0..n_queries {
        for c in 0..n_classes {
            let x = logits[q * n_classes + c];
            let pos = target[q] == c;
            parts.class += focal_loss(x, pos, w.focal_alpha, w.focal_gamma) / norm;
            grad_logits[q * n_classes + c] =
                w.class * focal_loss_grad(x, pos, w.focal_alpha, w.focal_gamma) / norm;
        }
    }

    for &(q, g) in &assignment.pairs {
        let pb = BoxN::from_slice(&boxes[q * 4..q * 4 + 4]);
        let gb = BoxN::from_slice(&gt_boxes[g * 4..g * 4 + 4]);
        for i in 0..4 {
            let d = pb.to_array()[i] - gb.to_array()[i];
            parts.l1 += d.abs() / norm;
            grad_boxes[q * 4 + i] += w.l1 * d.signum() / norm;
        }
        let (gv, ggrad) = giou_with_grad(pb, gb);
        parts.giou += (1.0 - gv) / norm;
        for i in 0..4 {
            grad_boxes[q * 4 + i] += w.giou * (-ggrad[i]) / norm;
        }
    }

    parts.total = w.class * parts.class + w.l1 * parts.l1 + w.giou * parts.giou;
    Ok(SetLossOutput {
        parts,
        assignment,
        grad_logits,
        grad_boxes,
    })
}
