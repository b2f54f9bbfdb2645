//! Box parameterizations: reference-relative decoding, iterative refinement
//! with gradient blocking, box-size offset modulation, two-stage proposal
//! boxes, top-k selection, and IoU / generalized IoU with analytic
//! gradients.
//!
//! All boxes are normalized `(cx, cy, w, h)` in `[0, 1]^4`; raw (pre-sigmoid)
//! predictions are unconstrained reals.

use crate::attention::{AttnConfig, SamplingPlan};
use crate::kernels::{inverse_sigmoid, sigmoid, sigmoid_grad, INV_SIGMOID_EPS};

/// Normalized box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxN {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxN {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// `(x1, y1, x2, y2)` corners.
    pub fn corners(self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(self) -> f64 {
        self.w * self.h
    }
}

/// Decode raw head outputs as offsets relative to a reference point:
/// center coordinates in logit space around the reference, width/height
/// through a plain sigmoid.
pub fn decode_box(ref_x: f64, ref_y: f64, raw: &[f64]) -> BoxN {
    BoxN::new(
        sigmoid(raw[0] + inverse_sigmoid(ref_x, INV_SIGMOID_EPS)),
        sigmoid(raw[1] + inverse_sigmoid(ref_y, INV_SIGMOID_EPS)),
        sigmoid(raw[2]),
        sigmoid(raw[3]),
    )
}

/// Backward of [`decode_box`]: gradients w.r.t. the 4 raw values and the
/// 2 reference coordinates (zero outside the inverse-sigmoid clamp range).
pub fn decode_box_grad(
    ref_x: f64,
    ref_y: f64,
    raw: &[f64],
    upstream: &[f64],
) -> ([f64; 4], [f64; 2]) {
    let lx = raw[0] + inverse_sigmoid(ref_x, INV_SIGMOID_EPS);
    let ly = raw[1] + inverse_sigmoid(ref_y, INV_SIGMOID_EPS);
    let d = [
        sigmoid_grad(lx) * upstream[0],
        sigmoid_grad(ly) * upstream[1],
        sigmoid_grad(raw[2]) * upstream[2],
        sigmoid_grad(raw[3]) * upstream[3],
    ];
    let clamp_grad = |p: f64, g: f64| -> f64 {
        if p > INV_SIGMOID_EPS && p < 1.0 - INV_SIGMOID_EPS {
            g / (p * (1.0 - p))
        } else {
            0.0
        }
    };
    (d, [clamp_grad(ref_x, d[0]), clamp_grad(ref_y, d[1])])
}

/// The initial box for iterative refinement: centered on the reference with
/// a 0.1 size prior.
pub fn initial_box(ref_x: f64, ref_y: f64, size_prior: f64) -> BoxN {
    BoxN::new(ref_x, ref_y, size_prior, size_prior)
}

/// One refinement step: every coordinate updated in inverse-sigmoid space.
/// By contract, gradients do not propagate into `prev` (the backward is
/// [`refine_box_grad`], which only returns delta gradients).
pub fn refine_box(prev: BoxN, deltas: &[f64]) -> BoxN {
    let step = |p: f64, d: f64| sigmoid(d + inverse_sigmoid(p, INV_SIGMOID_EPS));
    BoxN::new(
        step(prev.cx, deltas[0]),
        step(prev.cy, deltas[1]),
        step(prev.w, deltas[2]),
        step(prev.h, deltas[3]),
    )
}

/// Backward of [`refine_box`] through the delta path only; the previous-box
/// path is blocked.
pub fn refine_box_grad(prev: BoxN, deltas: &[f64], upstream: &[f64]) -> [f64; 4] {
    let g = |p: f64, d: f64, u: f64| sigmoid_grad(d + inverse_sigmoid(p, INV_SIGMOID_EPS)) * u;
    [
        g(prev.cx, deltas[0], upstream[0]),
        g(prev.cy, deltas[1], upstream[1]),
        g(prev.w, deltas[2], upstream[2]),
        g(prev.h, deltas[3], upstream[3]),
    ]
}

/// Scale sampling offsets by the previous box size (the reference itself
/// becomes the box center; the attention operator applies the same math
/// when given box references).
pub fn modulate_offsets(cfg: &AttnConfig, plan: &SamplingPlan, prev: &[f64]) -> SamplingPlan {
    let mut out = plan.clone();
    for q in 0..plan.nq {
        let b = &prev[q * 4..q * 4 + 4];
        for m in 0..cfg.heads {
            for l in 0..cfg.levels {
                for k in 0..cfg.points {
                    let idx = SamplingPlan::o_idx(cfg, q, m, l, k);
                    out.offsets[idx] *= b[2];
                    out.offsets[idx + 1] *= b[3];
                }
            }
        }
    }
    out
}

/// First-stage proposal box for a pixel at normalized coordinates on level
/// `level` (1-based): center offsets around the pixel, size around the
/// level-dependent prior `2^level * base_scale`.
pub fn propose_box(
    pix_x: f64,
    pix_y: f64,
    level: usize,
    deltas: &[f64],
    base_scale: f64,
) -> BoxN {
    let prior = (1u64 << level) as f64 * base_scale;
    BoxN::new(
        sigmoid(deltas[0] + inverse_sigmoid(pix_x, INV_SIGMOID_EPS)),
        sigmoid(deltas[1] + inverse_sigmoid(pix_y, INV_SIGMOID_EPS)),
        sigmoid(deltas[2] + inverse_sigmoid(prior, INV_SIGMOID_EPS)),
        sigmoid(deltas[3] + inverse_sigmoid(prior, INV_SIGMOID_EPS)),
    )
}

/// Backward of [`propose_box`] w.r.t. the deltas (pixel coordinates and the
/// prior are constants).
pub fn propose_box_grad(
    pix_x: f64,
    pix_y: f64,
    level: usize,
    deltas: &[f64],
    base_scale: f64,
    upstream: &[f64],
) -> [f64; 4] {
    let prior = (1u64 << level) as f64 * base_scale;
    let lx = deltas[0] + inverse_sigmoid(pix_x, INV_SIGMOID_EPS);
    let ly = deltas[1] + inverse_sigmoid(pix_y, INV_SIGMOID_EPS);
    let lw = deltas[2] + inverse_sigmoid(prior, INV_SIGMOID_EPS);
    let lh = deltas[3] + inverse_sigmoid(prior, INV_SIGMOID_EPS);
    [
        sigmoid_grad(lx) * upstream[0],
        sigmoid_grad(ly) * upstream[1],
        sigmoid_grad(lw) * upstream[2],
        sigmoid_grad(lh) * upstream[3],
    ]
}

/// Base object scale for first-stage proposals.
pub const DEFAULT_BASE_SCALE: f64 = 0.05;

/// Indices of the `k` highest-scoring proposals, descending score, ties
/// broken by lower index.
pub fn top_k_proposals(scores: &[f64], k: usize) -> crate::Result<Vec<usize>> {
    if k > scores.len() {
        return Err(crate::DdError::Config(format!(
            "top-k {k} exceeds {} proposals",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    Ok(idx)
}

/// Plain intersection-over-union.
pub fn iou(a: BoxN, b: BoxN) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU in `(-1, 1]` and its gradient w.r.t. the first box's
/// `(cx, cy, w, h)`; subgradients of min/max at ties follow the first box.
pub fn giou_with_grad(a: BoxN, b: BoxN) -> (f64, [f64; 4]) {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();

    // Intersection
    let ix1 = ax1.max(bx1);
    let iy1 = ay1.max(by1);
    let ix2 = ax2.min(bx2);
    let iy2 = ay2.min(by2);
    let iw = (ix2 - ix1).max(0.0);
    let ih = (iy2 - iy1).max(0.0);
    let inter = iw * ih;

    let area_a = (ax2 - ax1) * (ay2 - ay1);
    let area_b = (bx2 - bx1) * (by2 - by1);
    let union = area_a + area_b - inter;

    // Enclosing hull
    let hx1 = ax1.min(bx1);
    let hy1 = ay1.min(by1);
    let hx2 = ax2.max(bx2);
    let hy2 = ay2.max(by2);
    let hull = (hx2 - hx1) * (hy2 - hy1);

    let giou = inter / union - (hull - union) / hull;

    // Derivatives w.r.t. the first box's corners.
    // d inter / d corners
    let (mut di_dax1, mut di_day1, mut di_dax2, mut di_day2) = (0.0, 0.0, 0.0, 0.0);
    if iw > 0.0 && ih > 0.0 {
        if ax1 >= bx1 {
            di_dax1 = -ih;
        }
        if ax2 <= bx2 {
            di_dax2 = ih;
        }
        if ay1 >= by1 {
            di_day1 = -iw;
        }
        if ay2 <= by2 {
            di_day2 = iw;
        }
    }
    // d area_a / d corners
    let da = [
        -(ay2 - ay1),
        -(ax2 - ax1),
        ay2 - ay1,
        ax2 - ax1,
    ];
    // d hull / d corners
    let hw = hx2 - hx1;
    let hh = hy2 - hy1;
    let dh = [
        if ax1 <= bx1 { -hh } else { 0.0 },
        if ay1 <= by1 { -hw } else { 0.0 },
        if ax2 >= bx2 { hh } else { 0.0 },
        if ay2 >= by2 { hw } else { 0.0 },
    ];

    let di = [di_dax1, di_day1, di_dax2, di_day2];
    let mut d_corners = [0.0; 4];
    for i in 0..4 {
        let du = da[i] - di[i];
        // d(giou)/dc = [di*U - I*dU]/U^2 - [(dH - dU)*H - (H - U)*dH]/H^2
        let d_iou = (di[i] * union - inter * du) / (union * union);
        let d_pen = ((dh[i] - du) * hull - (hull - union) * dh[i]) / (hull * hull);
        d_corners[i] = d_iou - d_pen;
    }
    // Corners to (cx, cy, w, h): x1 = cx - w/2, x2 = cx + w/2.
    let grad = [
        d_corners[0] + d_corners[2],
        d_corners[1] + d_corners[3],
        0.5 * (d_corners[2] - d_corners[0]),
        0.5 * (d_corners[3] - d_corners[1]),
    ];
    (giou, grad)
}
