//! Minimal dense-array numerics: bilinear sampling with analytic gradients,
//! softmax, sigmoid / inverse sigmoid, and the finite-difference gradient
//! checker used as the module-wide oracle.
//!
//! Conventions (shared by the whole crate):
//! - pixel `(i, j)` of a feature map sits at continuous coordinate `(i, j)`,
//!   no half-pixel offset;
//! - sampling outside `[0, W-1] x [0, H-1]` reads zeros (zero padding);
//! - on integer gridlines the gradient uses the one-sided choice of the
//!   cell to the left (below), so `floor` is shifted down at exact integers.

use crate::macs;

/// Default clamp for [`inverse_sigmoid`]; keeps logits bounded by ~11.5.
pub const INV_SIGMOID_EPS: f64 = 1e-5;

/// A dense `C x H x W` feature map, row-major within each channel.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Vec<f64>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub level_id: usize,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize, level_id: usize) -> Self {
        Self {
            data: vec![0.0; channels * height * width],
            channels,
            height,
            width,
            level_id,
        }
    }

    pub fn from_vec(
        data: Vec<f64>,
        channels: usize,
        height: usize,
        width: usize,
        level_id: usize,
    ) -> Self {
        assert_eq!(data.len(), channels * height * width);
        Self {
            data,
            channels,
            height,
            width,
            level_id,
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    /// Per-pixel view: the `C`-vector at `(y, x)` gathered into a new vec.
    pub fn pixel(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.at(c, y, x)).collect()
    }
}

/// A 2-d point; pixel units or normalized depending on the caller's context.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// The four corner taps of one bilinear sample.
///
/// `weight` is the interpolation weight of pixel `(iy, ix)`; `dw_dx` /
/// `dw_dy` are its derivatives w.r.t. the sample coordinates. Corners
/// outside the map are reported with `in_bounds = false` and contribute
/// zero value (their spatial weight derivative still matters only through
/// in-bounds taps, so out-of-bounds taps are skipped entirely).
#[derive(Debug, Clone, Copy)]
pub struct BilinearTap {
    pub ix: i64,
    pub iy: i64,
    pub weight: f64,
    pub dw_dx: f64,
    pub dw_dy: f64,
    pub in_bounds: bool,
}

/// Base cell index with the one-sided convention: at exact integers take
/// the cell to the left, so the sub-gradient is continuous from the left.
#[inline]
fn base_index(v: f64) -> f64 {
    let f = v.floor();
    if f == v {
        f - 1.0
    } else {
        f
    }
}

/// Decompose a sample point into its 4 bilinear taps.
pub fn bilinear_taps(p: Point2, height: usize, width: usize) -> [BilinearTap; 4] {
    let x0 = base_index(p.x);
    let y0 = base_index(p.y);
    let fx = p.x - x0; // in (0, 1]
    let fy = p.y - y0;
    let (h, w) = (height as i64, width as i64);
    let mut taps = [BilinearTap {
        ix: 0,
        iy: 0,
        weight: 0.0,
        dw_dx: 0.0,
        dw_dy: 0.0,
        in_bounds: false,
    }; 4];
    // (dx, dy) in {0,1}^2; weight = wx * wy with wx = 1-fx or fx.
    for (slot, (dx, dy)) in [(0i64, 0i64), (1, 0), (0, 1), (1, 1)].iter().enumerate() {
        let ix = x0 as i64 + dx;
        let iy = y0 as i64 + dy;
        let (wx, dwx) = if *dx == 0 { (1.0 - fx, -1.0) } else { (fx, 1.0) };
        let (wy, dwy) = if *dy == 0 { (1.0 - fy, -1.0) } else { (fy, 1.0) };
        taps[slot] = BilinearTap {
            ix,
            iy,
            weight: wx * wy,
            dw_dx: dwx * wy,
            dw_dy: wx * dwy,
            in_bounds: ix >= 0 && ix < w && iy >= 0 && iy < h,
        };
    }
    taps
}

/// Bilinearly sample all channels of `map` at pixel-space point `p`.
///
/// Out-of-bounds taps contribute zero (zero-padding convention). Total
/// function: any finite `p` is valid, including far outside the support.
pub fn bilinear_sample(map: &FeatureMap, p: Point2) -> Vec<f64> {
    let mut out = vec![0.0; map.channels];
    bilinear_sample_into(map, p, &mut out);
    out
}

/// As [`bilinear_sample`] but accumulating into a caller buffer.
pub fn bilinear_sample_into(map: &FeatureMap, p: Point2, out: &mut [f64]) {
    debug_assert_eq!(out.len(), map.channels);
    let taps = bilinear_taps(p, map.height, map.width);
    out.iter_mut().for_each(|v| *v = 0.0);
    for tap in taps.iter().filter(|t| t.in_bounds) {
        let (iy, ix) = (tap.iy as usize, tap.ix as usize);
        for (c, v) in out.iter_mut().enumerate() {
            *v += tap.weight * map.at(c, iy, ix);
        }
    }
    // 4 taps x C fused multiply-adds.
    macs::add(4 * map.channels as u64);
}

/// Backward of [`bilinear_sample`]: scatter `upstream` into a map-shaped
/// gradient and return the analytic derivative w.r.t. the sample point.
pub fn bilinear_sample_grad(
    map: &FeatureMap,
    p: Point2,
    upstream: &[f64],
) -> (FeatureMap, (f64, f64)) {
    let mut grad_map = FeatureMap::zeros(map.channels, map.height, map.width, map.level_id);
    let g = bilinear_sample_grad_into(map, p, upstream, &mut grad_map.data);
    (grad_map, g)
}

/// Scatter-accumulate form of the bilinear backward pass.
///
/// `grad_map` must be `C*H*W` and is accumulated into, which lets a caller
/// reuse one buffer across many sample points.
pub fn bilinear_sample_grad_into(
    map: &FeatureMap,
    p: Point2,
    upstream: &[f64],
    grad_map: &mut [f64],
) -> (f64, f64) {
    debug_assert_eq!(upstream.len(), map.channels);
    debug_assert_eq!(grad_map.len(), map.data.len());
    let taps = bilinear_taps(p, map.height, map.width);
    let (h, w) = (map.height, map.width);
    let mut gx = 0.0;
    let mut gy = 0.0;
    for tap in taps.iter().filter(|t| t.in_bounds) {
        let (iy, ix) = (tap.iy as usize, tap.ix as usize);
        for (c, &u) in upstream.iter().enumerate() {
            let idx = (c * h + iy) * w + ix;
            grad_map[idx] += tap.weight * u;
            let v = map.at(c, iy, ix);
            gx += tap.dw_dx * v * u;
            gy += tap.dw_dy * v * u;
        }
    }
    macs::add(3 * 4 * map.channels as u64);
    (gx, gy)
}

/// Numerically stabilized softmax (max subtraction).
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(v: &mut [f64]) {
    if v.is_empty() {
        return;
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Backward of softmax: given the forward output `s` and upstream `g`,
/// returns `ds^T g` via the Jacobian `diag(s) - s s^T`.
pub fn softmax_grad(s: &[f64], upstream: &[f64]) -> Vec<f64> {
    let dot: f64 = s.iter().zip(upstream).map(|(a, b)| a * b).sum();
    macs::add(2 * s.len() as u64);
    s.iter()
        .zip(upstream)
        .map(|(&si, &gi)| si * (gi - dot))
        .collect()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of the sigmoid at logit `x`.
#[inline]
pub fn sigmoid_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// Clamped logit: `log(p'/(1-p'))` with `p' = clamp(p, eps, 1-eps)`.
#[inline]
pub fn inverse_sigmoid(p: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    (p / (1.0 - p)).ln()
}

/// Report from a finite-difference gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub n_checked: usize,
}

impl GradReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err < rel_tol
    }
}

/// Below this magnitude both gradients are treated as zero and only the
/// absolute error is recorded; relative error on FD noise is meaningless.
const REL_FLOOR: f64 = 1e-7;

/// Central finite-difference check of `analytic_grad` against `f` at `x`.
///
/// `f` is re-evaluated at `x[i] +- step` for every coordinate. Non-finite
/// evaluations are reported as an error.
pub fn finite_diff_check<F>(
    mut f: F,
    x: &[f64],
    analytic_grad: &[f64],
    step: f64,
) -> crate::Result<GradReport>
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic_grad.len());
    assert!(step > 0.0);
    let mut xs = x.to_vec();
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    for i in 0..xs.len() {
        let orig = xs[i];
        xs[i] = orig + step;
        let fp = f(&xs);
        xs[i] = orig - step;
        let fm = f(&xs);
        xs[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(crate::DdError::NonFinite(format!(
                "finite_diff_check: f non-finite at coordinate {i}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic_grad[i];
        let abs = (a - numeric).abs();
        max_abs = max_abs.max(abs);
        let denom = a.abs().max(numeric.abs());
        if denom > REL_FLOOR {
            max_rel = max_rel.max(abs / denom);
        }
    }
    Ok(GradReport {
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        n_checked: xs.len(),
    })
}
