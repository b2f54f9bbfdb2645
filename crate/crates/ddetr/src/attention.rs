//! The three attention operators: dense multi-head attention, single-scale
//! deformable attention, and multi-scale deformable attention, with forward
//! passes, analytic backward passes, the 3MK-channel sampling-parameter
//! head, its deterministic initialization, and the analytic cost model.
//!
//! Head-stacked weight layout: the per-head projections `W'_m`, `U_m`, `V_m`
//! (`[C_v, C]` each) are stored stacked into one `[C, C]` matrix whose row
//! block `m*C_v..(m+1)*C_v` belongs to head `m`. The output projections
//! `W_m` (`[C, C_v]`) stack into a `[C, C]` matrix by column blocks, so the
//! final output is `w_out * concat_m(h_m)`.

use crate::kernels::{
    bilinear_sample_grad_into, bilinear_sample_into, softmax_grad, softmax_in_place, FeatureMap,
};
use crate::macs;
use crate::nn::Linear;
use crate::param::{GradBuf, Init, ParamId, ParamStore};
use crate::{DdError, Result};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Attention dimensions shared by all operators.
#[derive(Debug, Clone, Copy)]
pub struct AttnConfig {
    /// Number of heads M.
    pub heads: usize,
    /// Model width C.
    pub channels: usize,
    /// Per-head width C_v = C / M.
    pub head_dim: usize,
    /// Sampling points per level K.
    pub points: usize,
    /// Feature levels L.
    pub levels: usize,
}

impl AttnConfig {
    pub fn new(heads: usize, channels: usize, points: usize, levels: usize) -> Result<Self> {
        if heads == 0 || points == 0 || levels == 0 || channels == 0 {
            return Err(DdError::Config("attention dims must be >= 1".into()));
        }
        if !channels.is_multiple_of(heads) {
            return Err(DdError::Config(format!(
                "channels {channels} not divisible by heads {heads}"
            )));
        }
        Ok(Self {
            heads,
            channels,
            head_dim: channels / heads,
            points,
            levels,
        })
    }
}

// ---------------------------------------------------------------------------
// Dense multi-head attention
// ---------------------------------------------------------------------------

/// Parameters of dense multi-head attention (no biases, as in the
/// formulation: query/key projections U, V and value/output W', W).
#[derive(Debug, Clone, Copy)]
pub struct DenseAttnParams {
    pub cfg: AttnConfig,
    pub u: ParamId,
    pub v: ParamId,
    pub w_val: ParamId,
    pub w_out: ParamId,
}

impl DenseAttnParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: AttnConfig,
    ) -> Self {
        let c = cfg.channels;
        let xavier = Init::Xavier {
            fan_in: c,
            fan_out: c,
        };
        let u = store.alloc(
            format!("{name}.u"),
            &[c, c],
            Init::Xavier {
                fan_in: c,
                fan_out: c,
            },
            rng,
        );
        let v = store.alloc(format!("{name}.v"), &[c, c], xavier, rng);
        let w_val = store.alloc(
            format!("{name}.w_val"),
            &[c, c],
            Init::Xavier {
                fan_in: c,
                fan_out: c,
            },
            rng,
        );
        let w_out = store.alloc(
            format!("{name}.w_out"),
            &[c, c],
            Init::Xavier {
                fan_in: c,
                fan_out: c,
            },
            rng,
        );
        Self {
            cfg,
            u,
            v,
            w_val,
            w_out,
        }
    }
}

pub struct DenseAttnCache {
    pub nq: usize,
    pub nk: usize,
    pub q_in: Vec<f64>,
    pub k_in: Vec<f64>,
    pub v_in: Vec<f64>,
    pub qh: Vec<f64>,
    pub kh: Vec<f64>,
    pub vh: Vec<f64>,
    /// Softmaxed weights, layout `[nq, M, nk]`.
    pub attn: Vec<f64>,
    /// Per-query concatenated head outputs, `[nq, C]`.
    pub heads_out: Vec<f64>,
}

/// `y = W x` for a head-stacked `[C, C]` matrix over `[n, C]` tokens.
fn project(w: &[f64], x: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let xi = &x[i * c..(i + 1) * c];
        let oi = &mut out[i * c..(i + 1) * c];
        for (r, ov) in oi.iter_mut().enumerate() {
            let row = &w[r * c..(r + 1) * c];
            *ov = row.iter().zip(xi).map(|(a, b)| a * b).sum();
        }
    }
    macs::add((n * c * c) as u64);
    out
}

/// Backward of [`project`]: accumulates `gw += g x^T` and returns `W^T g`.
fn project_backward(
    w: &[f64],
    x: &[f64],
    n: usize,
    c: usize,
    grad_out: &[f64],
    gw: &mut [f64],
) -> Vec<f64> {
    let mut grad_in = vec![0.0; n * c];
    for i in 0..n {
        let xi = &x[i * c..(i + 1) * c];
        let gi = &grad_out[i * c..(i + 1) * c];
        let gxi = &mut grad_in[i * c..(i + 1) * c];
        for (r, &g) in gi.iter().enumerate() {
            let row = &w[r * c..(r + 1) * c];
            let grow = &mut gw[r * c..(r + 1) * c];
            for k in 0..c {
                grow[k] += g * xi[k];
                gxi[k] += g * row[k];
            }
        }
    }
    macs::add((2 * n * c * c) as u64);
    grad_in
}

/// Dense multi-head attention forward with distinct query / key / value
/// token streams (the decoder passes value without positional content).
pub fn dense_attn_forward(
    store: &ParamStore,
    p: &DenseAttnParams,
    q_in: &[f64],
    k_in: &[f64],
    v_in: &[f64],
    nq: usize,
    nk: usize,
) -> Result<(Vec<f64>, DenseAttnCache)> {
    let c = p.cfg.channels;
    let m = p.cfg.heads;
    let cv = p.cfg.head_dim;
    if q_in.len() != nq * c || k_in.len() != nk * c || v_in.len() != nk * c {
        return Err(DdError::ShapeMismatch(format!(
            "dense attn: q {} k {} v {} vs nq {nq} nk {nk} C {c}",
            q_in.len(),
            k_in.len(),
            v_in.len()
        )));
    }
    let qh = project(store.get(p.u), q_in, nq, c);
    let kh = project(store.get(p.v), k_in, nk, c);
    let vh = project(store.get(p.w_val), v_in, nk, c);

    let scale = 1.0 / (cv as f64).sqrt();
    let mut attn = vec![0.0; nq * m * nk];
    let mut heads_out = vec![0.0; nq * c];
    for qi in 0..nq {
        for h in 0..m {
            let qv = &qh[qi * c + h * cv..qi * c + (h + 1) * cv];
            let logits = &mut attn[(qi * m + h) * nk..(qi * m + h + 1) * nk];
            for (ki, lv) in logits.iter_mut().enumerate() {
                let kv = &kh[ki * c + h * cv..ki * c + (h + 1) * cv];
                *lv = scale * qv.iter().zip(kv).map(|(a, b)| a * b).sum::<f64>();
            }
            softmax_in_place(logits);
            let out = &mut heads_out[qi * c + h * cv..qi * c + (h + 1) * cv];
            for (ki, &a) in logits.iter().enumerate() {
                let vv = &vh[ki * c + h * cv..ki * c + (h + 1) * cv];
                for (o, val) in out.iter_mut().zip(vv) {
                    *o += a * val;
                }
            }
        }
    }
    macs::add((2 * nq * nk * c) as u64);
    let out = project(store.get(p.w_out), &heads_out, nq, c);
    Ok((
        out,
        DenseAttnCache {
            nq,
            nk,
            q_in: q_in.to_vec(),
            k_in: k_in.to_vec(),
            v_in: v_in.to_vec(),
            qh,
            kh,
            vh,
            attn,
            heads_out,
        },
    ))
}

/// Backward of [`dense_attn_forward`]; returns gradients w.r.t. the three
/// input streams and accumulates parameter gradients.
pub fn dense_attn_backward(
    store: &ParamStore,
    p: &DenseAttnParams,
    cache: &DenseAttnCache,
    grad_out: &[f64],
    grad: &mut GradBuf,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let c = p.cfg.channels;
    let m = p.cfg.heads;
    let cv = p.cfg.head_dim;
    let (nq, nk) = (cache.nq, cache.nk);
    let scale = 1.0 / (cv as f64).sqrt();

    let w_out = store.get(p.w_out).to_vec();
    let g_heads = {
        let gw = grad.get_mut(store, p.w_out);
        project_backward(&w_out, &cache.heads_out, nq, c, grad_out, gw)
    };

    let mut g_qh = vec![0.0; nq * c];
    let mut g_kh = vec![0.0; nk * c];
    let mut g_vh = vec![0.0; nk * c];
    for qi in 0..nq {
        for h in 0..m {
            let attn = &cache.attn[(qi * m + h) * nk..(qi * m + h + 1) * nk];
            let g_h = &g_heads[qi * c + h * cv..qi * c + (h + 1) * cv];
            // grads through the weighted sum
            let mut g_a = vec![0.0; nk];
            for ki in 0..nk {
                let vv = &cache.vh[ki * c + h * cv..ki * c + (h + 1) * cv];
                g_a[ki] = g_h.iter().zip(vv).map(|(a, b)| a * b).sum();
                let gv = &mut g_vh[ki * c + h * cv..ki * c + (h + 1) * cv];
                for (g, u) in gv.iter_mut().zip(g_h) {
                    *g += attn[ki] * u;
                }
            }
            // softmax and logits
            let g_logits = softmax_grad(attn, &g_a);
            let qv = &cache.qh[qi * c + h * cv..qi * c + (h + 1) * cv];
            let gq = &mut g_qh[qi * c + h * cv..qi * c + (h + 1) * cv];
            for (ki, &gl) in g_logits.iter().enumerate() {
                let kv = &cache.kh[ki * c + h * cv..ki * c + (h + 1) * cv];
                let gk = &mut g_kh[ki * c + h * cv..ki * c + (h + 1) * cv];
                let s = gl * scale;
                for i in 0..cv {
                    gq[i] += s * kv[i];
                    gk[i] += s * qv[i];
                }
            }
        }
    }
    macs::add((4 * nq * nk * c) as u64);

    let grad_q = {
        let gw = grad.get_mut(store, p.u);
        project_backward(store.get(p.u), &cache.q_in, nq, c, &g_qh, gw)
    };
    let grad_k = {
        let gw = grad.get_mut(store, p.v);
        project_backward(store.get(p.v), &cache.k_in, nk, c, &g_kh, gw)
    };
    let grad_v = {
        let gw = grad.get_mut(store, p.w_val);
        project_backward(store.get(p.w_val), &cache.v_in, nk, c, &g_vh, gw)
    };
    (grad_q, grad_k, grad_v)
}

/// The plain operator: attention over all keys, with the keys doubling as
/// values.
pub fn multi_head_attn(
    store: &ParamStore,
    p: &DenseAttnParams,
    queries: &[f64],
    keys: &[f64],
    nq: usize,
    nk: usize,
) -> Result<Vec<f64>> {
    Ok(dense_attn_forward(store, p, queries, keys, keys, nq, nk)?.0)
}

// ---------------------------------------------------------------------------
// Deformable attention
// ---------------------------------------------------------------------------

/// Canonical 8-direction offset grid (heads beyond 8 repeat cyclically).
pub const A5_DIRECTIONS: [(f64, f64); 8] = [
    (-1.0, -1.0),
    (-1.0, 0.0),
    (-1.0, 1.0),
    (0.0, -1.0),
    (0.0, 1.0),
    (1.0, -1.0),
    (1.0, 0.0),
    (1.0, 1.0),
];

/// Offset-bias values for the deterministic init: head `m` points along
/// `A5_DIRECTIONS[m % 8]` with magnitude `k` for point index `k-1`, on every
/// level; refinement mode scales everything by `1/(2K)` so initial samples
/// stay inside the previous box.
pub fn init_offset_bias(cfg: &AttnConfig, refinement_mode: bool) -> Vec<f64> {
    let scale = if refinement_mode {
        1.0 / (2.0 * cfg.points as f64)
    } else {
        1.0
    };
    let mut bias = Vec::with_capacity(cfg.heads * cfg.levels * cfg.points * 2);
    for m in 0..cfg.heads {
        let (dx, dy) = A5_DIRECTIONS[m % 8];
        for _l in 0..cfg.levels {
            for k in 1..=cfg.points {
                bias.push(dx * k as f64 * scale);
                bias.push(dy * k as f64 * scale);
            }
        }
    }
    bias
}

/// Parameters of (multi-scale) deformable attention.
///
/// The sampling head is a single linear map `C -> 3MKL` conceptually; it is
/// stored as two linears, one for the `2MKL` offset channels and one for
/// the `MKL` weight channels (softmaxed jointly over `(l, k)` per head).
#[derive(Debug, Clone, Copy)]
pub struct DeformAttnParams {
    pub cfg: AttnConfig,
    pub w_val: ParamId,
    pub w_out: ParamId,
    pub sampling_offsets: Linear,
    pub attn_weights: Linear,
}

impl DeformAttnParams {
    /// Construct with the deterministic initialization: zero linear weights,
    /// weight bias giving uniform `A = 1/(LK)` and the directional offset
    /// grid (scaled by `1/(2K)` in refinement mode). The offset projection
    /// carries the 0.1 learning-rate multiplier.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: AttnConfig,
        refinement_mode: bool,
    ) -> Self {
        let c = cfg.channels;
        let mlk = cfg.heads * cfg.levels * cfg.points;
        let w_val = store.alloc(
            format!("{name}.w_val"),
            &[c, c],
            Init::Xavier {
                fan_in: c,
                fan_out: c,
            },
            rng,
        );
        let w_out = store.alloc(
            format!("{name}.w_out"),
            &[c, c],
            Init::Xavier {
                fan_in: c,
                fan_out: c,
            },
            rng,
        );
        let off_w = store.alloc_with_lr(
            format!("{name}.sampling_offsets.weight"),
            &[2 * mlk, c],
            Init::Zeros,
            rng,
            0.1,
        );
        let off_b = store.alloc_with_lr(
            format!("{name}.sampling_offsets.bias"),
            &[2 * mlk],
            Init::Values(init_offset_bias(&cfg, refinement_mode)),
            rng,
            0.1,
        );
        let wt_w = store.alloc(
            format!("{name}.attn_weights.weight"),
            &[mlk, c],
            Init::Zeros,
            rng,
        );
        let wt_b = store.alloc(format!("{name}.attn_weights.bias"), &[mlk], Init::Zeros, rng);
        Self {
            cfg,
            w_val,
            w_out,
            sampling_offsets: Linear {
                weight: off_w,
                bias: Some(off_b),
                in_dim: c,
                out_dim: 2 * mlk,
            },
            attn_weights: Linear {
                weight: wt_w,
                bias: Some(wt_b),
                in_dim: c,
                out_dim: mlk,
            },
        }
    }
}

/// Per-query sampling offsets and normalized weights.
///
/// Layouts: `offsets` is `[nq, M, L, K, 2]` (x then y, pixel units of each
/// level in plain mode, box-relative units in modulated mode); `weights` is
/// `[nq, M, L, K]`, softmax-normalized jointly over `(l, k)` per head.
#[derive(Debug, Clone)]
pub struct SamplingPlan {
    pub nq: usize,
    pub offsets: Vec<f64>,
    pub weights: Vec<f64>,
}

impl SamplingPlan {
    #[inline]
    pub fn w_idx(cfg: &AttnConfig, q: usize, m: usize, l: usize, k: usize) -> usize {
        ((q * cfg.heads + m) * cfg.levels + l) * cfg.points + k
    }

    #[inline]
    pub fn o_idx(cfg: &AttnConfig, q: usize, m: usize, l: usize, k: usize) -> usize {
        2 * Self::w_idx(cfg, q, m, l, k)
    }
}

/// Run the 3MK-channel sampling head: first `2MKL` channels become offsets,
/// the remaining `MKL` are softmaxed jointly over `(l, k)` per head.
pub fn predict_sampling_params(
    store: &ParamStore,
    p: &DeformAttnParams,
    z: &[f64],
    nq: usize,
) -> SamplingPlan {
    let offsets = p.sampling_offsets.forward(store, z, nq);
    let mut weights = p.attn_weights.forward(store, z, nq);
    let lk = p.cfg.levels * p.cfg.points;
    for q in 0..nq {
        for m in 0..p.cfg.heads {
            let base = (q * p.cfg.heads + m) * lk;
            softmax_in_place(&mut weights[base..base + lk]);
        }
    }
    SamplingPlan {
        nq,
        offsets,
        weights,
    }
}

/// Reference geometry for deformable sampling, in normalized coordinates.
#[derive(Debug, Clone, Copy)]
pub enum Reference<'a> {
    /// `[nq, 2]` points; sampling location on level `l` is
    /// `phi_l(p) + offset` with the offset in pixel units of that level.
    Points(&'a [f64]),
    /// `[nq, 4]` boxes `(cx, cy, w, h)`; the reference is the box center
    /// and offsets are modulated by the box size:
    /// `phi_l(center + offset * (w, h))`.
    Boxes(&'a [f64]),
}

/// Execution order for the value projection (both must agree).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecOrder {
    /// Sample the raw `C`-vector, then apply `W'_m` per sample.
    ProjectSampled,
    /// Apply `W'` to every pixel of every level first, then sample the
    /// per-head `C_v` slices.
    ProjectMap,
}

pub struct MsDeformCache {
    pub nq: usize,
    pub z: Vec<f64>,
    pub plan: SamplingPlan,
    pub refs: Vec<f64>,
    pub is_boxes: bool,
    pub level_dims: Vec<(usize, usize)>,
    /// Sampling location per `(q, m, l, k)` in pixel units of the level.
    pub pixel_locs: Vec<f64>,
    /// Raw sampled `C`-vectors per `(q, m, l, k)`.
    pub sampled: Vec<f64>,
    /// Projected per-head values `C_v` per `(q, m, l, k)`.
    pub proj_v: Vec<f64>,
    pub heads_out: Vec<f64>,
}

fn check_pyramid(cfg: &AttnConfig, pyramid: &[FeatureMap]) -> Result<()> {
    if pyramid.len() != cfg.levels {
        return Err(DdError::ShapeMismatch(format!(
            "pyramid has {} levels, config expects {}",
            pyramid.len(),
            cfg.levels
        )));
    }
    for map in pyramid {
        if map.channels != cfg.channels {
            return Err(DdError::ShapeMismatch(format!(
                "level {} has {} channels, config expects {}",
                map.level_id, map.channels, cfg.channels
            )));
        }
    }
    Ok(())
}

/// Sampling location on a level for one `(q, m, l, k)` tap.
#[inline]
fn sample_location(
    refs: &[f64],
    is_boxes: bool,
    q: usize,
    ox: f64,
    oy: f64,
    w_l: usize,
    h_l: usize,
) -> (f64, f64) {
    let sx = (w_l - 1) as f64;
    let sy = (h_l - 1) as f64;
    if is_boxes {
        let b = &refs[q * 4..q * 4 + 4];
        (((b[0] + ox * b[2]) * sx), ((b[1] + oy * b[3]) * sy))
    } else {
        (refs[q * 2] * sx + ox, refs[q * 2 + 1] * sy + oy)
    }
}

/// Multi-scale deformable attention forward (differentiable path).
///
/// `z` are the query features the sampling head reads; `pyramid` carries the
/// raw value features. Returns the output and the cache for the backward
/// pass.
pub fn ms_deform_attn_forward(
    store: &ParamStore,
    p: &DeformAttnParams,
    z: &[f64],
    refs: Reference<'_>,
    pyramid: &[FeatureMap],
    nq: usize,
) -> Result<(Vec<f64>, MsDeformCache)> {
    check_pyramid(&p.cfg, pyramid)?;
    let cfg = &p.cfg;
    let (c, m_heads, cv, kk, ll) = (
        cfg.channels,
        cfg.heads,
        cfg.head_dim,
        cfg.points,
        cfg.levels,
    );
    if z.len() != nq * c {
        return Err(DdError::ShapeMismatch(format!(
            "ms_deform_attn: z len {} vs nq {nq} x C {c}",
            z.len()
        )));
    }
    let (refs_v, is_boxes) = match refs {
        Reference::Points(r) => (r.to_vec(), false),
        Reference::Boxes(r) => (r.to_vec(), true),
    };
    let plan = predict_sampling_params(store, p, z, nq);
    let w_val = store.get(p.w_val);

    let n_taps = nq * m_heads * ll * kk;
    let mut pixel_locs = vec![0.0; n_taps * 2];
    let mut sampled = vec![0.0; n_taps * c];
    let mut proj_v = vec![0.0; n_taps * cv];
    let mut heads_out = vec![0.0; nq * c];
    let level_dims: Vec<(usize, usize)> = pyramid.iter().map(|f| (f.height, f.width)).collect();

    for q in 0..nq {
        for m in 0..m_heads {
            let h_out = &mut heads_out[q * c + m * cv..q * c + (m + 1) * cv];
            #[allow(clippy::needless_range_loop)]
            for l in 0..ll {
                let map = &pyramid[l];
                for k in 0..kk {
                    let t = SamplingPlan::w_idx(cfg, q, m, l, k);
                    let ox = plan.offsets[2 * t];
                    let oy = plan.offsets[2 * t + 1];
                    let (px, py) =
                        sample_location(&refs_v, is_boxes, q, ox, oy, map.width, map.height);
                    pixel_locs[2 * t] = px;
                    pixel_locs[2 * t + 1] = py;
                    let xs = &mut sampled[t * c..(t + 1) * c];
                    bilinear_sample_into(map, crate::kernels::Point2::new(px, py), xs);
                    let vs = &mut proj_v[t * cv..(t + 1) * cv];
                    for (r, vv) in vs.iter_mut().enumerate() {
                        let row = &w_val[(m * cv + r) * c..(m * cv + r + 1) * c];
                        *vv = row.iter().zip(xs.iter()).map(|(a, b)| a * b).sum();
                    }
                    let a = plan.weights[t];
                    for (h, vv) in h_out.iter_mut().zip(vs.iter()) {
                        *h += a * vv;
                    }
                }
            }
        }
    }
    macs::add((n_taps * (cv * c + cv)) as u64);
    let out = project(store.get(p.w_out), &heads_out, nq, c);
    Ok((
        out,
        MsDeformCache {
            nq,
            z: z.to_vec(),
            plan,
            refs: refs_v,
            is_boxes,
            level_dims,
            pixel_locs,
            sampled,
            proj_v,
            heads_out,
        },
    ))
}

/// Forward-only evaluation from an explicit sampling plan, in either
/// execution order. Used by the equivalence oracles and the benchmark.
pub fn ms_deform_attn_core(
    store: &ParamStore,
    p: &DeformAttnParams,
    plan: &SamplingPlan,
    refs: Reference<'_>,
    pyramid: &[FeatureMap],
    order: ExecOrder,
) -> Result<Vec<f64>> {
    check_pyramid(&p.cfg, pyramid)?;
    let cfg = &p.cfg;
    let (c, m_heads, cv, kk, ll) = (
        cfg.channels,
        cfg.heads,
        cfg.head_dim,
        cfg.points,
        cfg.levels,
    );
    let nq = plan.nq;
    let (refs_v, is_boxes) = match refs {
        Reference::Points(r) => (r, false),
        Reference::Boxes(r) => (r, true),
    };
    let w_val = store.get(p.w_val);

    // ProjectMap: project the whole pyramid once up front.
    let projected: Option<Vec<FeatureMap>> = match order {
        ExecOrder::ProjectSampled => None,
        ExecOrder::ProjectMap => Some(
            pyramid
                .iter()
                .map(|map| {
                    let mut out =
                        FeatureMap::zeros(c, map.height, map.width, map.level_id);
                    for y in 0..map.height {
                        for x in 0..map.width {
                            for r in 0..c {
                                let row = &w_val[r * c..(r + 1) * c];
                                let mut acc = 0.0;
                                #[allow(clippy::needless_range_loop)]
                                for ch in 0..c {
                                    acc += row[ch] * map.at(ch, y, x);
                                }
                                *out.at_mut(r, y, x) = acc;
                            }
                        }
                    }
                    macs::add((map.height * map.width * c * c) as u64);
                    out
                })
                .collect(),
        ),
    };

    let mut heads_out = vec![0.0; nq * c];
    let mut xs = vec![0.0; c];
    for q in 0..nq {
        for m in 0..m_heads {
            for l in 0..ll {
                let raw_map = &pyramid[l];
                for k in 0..kk {
                    let t = SamplingPlan::w_idx(cfg, q, m, l, k);
                    let ox = plan.offsets[2 * t];
                    let oy = plan.offsets[2 * t + 1];
                    let (px, py) = sample_location(
                        refs_v,
                        is_boxes,
                        q,
                        ox,
                        oy,
                        raw_map.width,
                        raw_map.height,
                    );
                    let a = plan.weights[t];
                    let h_out = &mut heads_out[q * c + m * cv..q * c + (m + 1) * cv];
                    match &projected {
                        None => {
                            bilinear_sample_into(
                                raw_map,
                                crate::kernels::Point2::new(px, py),
                                &mut xs,
                            );
                            for (r, h) in h_out.iter_mut().enumerate() {
                                let row = &w_val[(m * cv + r) * c..(m * cv + r + 1) * c];
                                let v: f64 = row.iter().zip(xs.iter()).map(|(x, y)| x * y).sum();
                                *h += a * v;
                            }
                            macs::add((cv * c + cv) as u64);
                        }
                        Some(proj) => {
                            // Sample only this head's C_v slice.
                            let map = &proj[l];
                            let taps =
                                crate::kernels::bilinear_taps(
                                    crate::kernels::Point2::new(px, py),
                                    map.height,
                                    map.width,
                                );
                            for (r, h) in h_out.iter_mut().enumerate() {
                                let mut v = 0.0;
                                for tap in taps.iter().filter(|t| t.in_bounds) {
                                    v += tap.weight
                                        * map.at(m * cv + r, tap.iy as usize, tap.ix as usize);
                                }
                                *h += a * v;
                            }
                            macs::add((5 * cv) as u64);
                        }
                    }
                }
            }
        }
    }
    Ok(project(store.get(p.w_out), &heads_out, nq, c))
}

/// Gradients produced by [`ms_deform_attn_backward`].
pub struct MsDeformGrads {
    /// Gradient w.r.t. the query features `z`, `[nq, C]`.
    pub z: Vec<f64>,
    /// Gradient w.r.t. the reference array (`[nq, 2]` points or `[nq, 4]`
    /// boxes depending on the forward mode).
    pub refs: Vec<f64>,
    /// Gradient w.r.t. each pyramid level's raw values, `C*H*W` each.
    pub pyramid: Vec<Vec<f64>>,
}

/// Analytic backward of [`ms_deform_attn_forward`]: chains through the
/// output projection, attention-weight softmax, value projection, bilinear
/// sampling (values and locations), and the sampling head.
pub fn ms_deform_attn_backward(
    store: &ParamStore,
    p: &DeformAttnParams,
    pyramid: &[FeatureMap],
    cache: &MsDeformCache,
    grad_out: &[f64],
    grad: &mut GradBuf,
) -> MsDeformGrads {
    let cfg = &p.cfg;
    let (c, m_heads, cv, kk, ll) = (
        cfg.channels,
        cfg.heads,
        cfg.head_dim,
        cfg.points,
        cfg.levels,
    );
    let nq = cache.nq;
    let lk = ll * kk;

    let w_out = store.get(p.w_out).to_vec();
    let g_heads = {
        let gw = grad.get_mut(store, p.w_out);
        project_backward(&w_out, &cache.heads_out, nq, c, grad_out, gw)
    };

    let w_val = store.get(p.w_val).to_vec();
    let mut g_weights = vec![0.0; nq * m_heads * lk];
    let mut g_offsets = vec![0.0; nq * m_heads * lk * 2];
    let mut g_refs = vec![0.0; cache.refs.len()];
    let mut g_pyr: Vec<Vec<f64>> = pyramid.iter().map(|f| vec![0.0; f.data.len()]).collect();
    let mut g_xs = vec![0.0; c];

    {
        let gw_val = grad.get_mut(store, p.w_val);
        for q in 0..nq {
            for m in 0..m_heads {
                let g_h = &g_heads[q * c + m * cv..q * c + (m + 1) * cv];
                for l in 0..ll {
                    let map = &pyramid[l];
                    let sx = (map.width - 1) as f64;
                    let sy = (map.height - 1) as f64;
                    for k in 0..kk {
                        let t = SamplingPlan::w_idx(cfg, q, m, l, k);
                        let a = cache.plan.weights[t];
                        let vs = &cache.proj_v[t * cv..(t + 1) * cv];
                        // dL/da and dL/dvs
                        g_weights[t] = g_h.iter().zip(vs).map(|(x, y)| x * y).sum();
                        let xs = &cache.sampled[t * c..(t + 1) * c];
                        g_xs.iter_mut().for_each(|v| *v = 0.0);
                        for (r, &gh) in g_h.iter().enumerate() {
                            let g_vs = a * gh;
                            let row = &w_val[(m * cv + r) * c..(m * cv + r + 1) * c];
                            let grow = &mut gw_val[(m * cv + r) * c..(m * cv + r + 1) * c];
                            for ch in 0..c {
                                grow[ch] += g_vs * xs[ch];
                                g_xs[ch] += g_vs * row[ch];
                            }
                        }
                        // Through the bilinear sample: values and location.
                        let px = cache.pixel_locs[2 * t];
                        let py = cache.pixel_locs[2 * t + 1];
                        let (gpx, gpy) = bilinear_sample_grad_into(
                            map,
                            crate::kernels::Point2::new(px, py),
                            &g_xs,
                            &mut g_pyr[l],
                        );
                        if cache.is_boxes {
                            let b = &cache.refs[q * 4..q * 4 + 4];
                            let ox = cache.plan.offsets[2 * t];
                            let oy = cache.plan.offsets[2 * t + 1];
                            g_offsets[2 * t] = gpx * sx * b[2];
                            g_offsets[2 * t + 1] = gpy * sy * b[3];
                            let gr = &mut g_refs[q * 4..q * 4 + 4];
                            gr[0] += gpx * sx;
                            gr[1] += gpy * sy;
                            gr[2] += gpx * sx * ox;
                            gr[3] += gpy * sy * oy;
                        } else {
                            g_offsets[2 * t] = gpx;
                            g_offsets[2 * t + 1] = gpy;
                            g_refs[q * 2] += gpx * sx;
                            g_refs[q * 2 + 1] += gpy * sy;
                        }
                    }
                }
            }
        }
    }
    macs::add((nq * m_heads * lk * (2 * cv * c + cv)) as u64);

    // Softmax backward per (q, m) over the joint (l, k) axis.
    let mut g_weight_logits = vec![0.0; nq * m_heads * lk];
    for q in 0..nq {
        for m in 0..m_heads {
            let base = (q * m_heads + m) * lk;
            let s = &cache.plan.weights[base..base + lk];
            let g = softmax_grad(s, &g_weights[base..base + lk]);
            g_weight_logits[base..base + lk].copy_from_slice(&g);
        }
    }

    // Through the two linear heads back to z.
    let mut g_z = p
        .sampling_offsets
        .backward(store, &cache.z, nq, &g_offsets, grad);
    let g_z2 = p
        .attn_weights
        .backward(store, &cache.z, nq, &g_weight_logits, grad);
    for (a, b) in g_z.iter_mut().zip(&g_z2) {
        *a += b;
    }
    MsDeformGrads {
        z: g_z,
        refs: g_refs,
        pyramid: g_pyr,
    }
}

/// Single-scale deformable attention: references in pixel coordinates of
/// `map`, softmax over `k` only (the `L = 1` case of the joint softmax).
pub fn deform_attn(
    store: &ParamStore,
    p: &DeformAttnParams,
    z: &[f64],
    refs_pixel: &[f64],
    map: &FeatureMap,
    nq: usize,
) -> Result<Vec<f64>> {
    if p.cfg.levels != 1 {
        return Err(DdError::ShapeMismatch(
            "deform_attn requires a single-level config".into(),
        ));
    }
    let sx = (map.width - 1) as f64;
    let sy = (map.height - 1) as f64;
    let refs_norm: Vec<f64> = refs_pixel
        .chunks(2)
        .flat_map(|p| [p[0] / sx, p[1] / sy])
        .collect();
    let pyramid = std::slice::from_ref(map);
    Ok(ms_deform_attn_forward(store, p, z, Reference::Points(&refs_norm), pyramid, nq)?.0)
}

// ---------------------------------------------------------------------------
// Cost model
// ---------------------------------------------------------------------------

/// Analytic FLOP (multiply-accumulate) estimates for the two operators.
#[derive(Debug, Clone, Serialize)]
pub struct CostModel {
    pub flops_dense: u64,
    pub flops_deform: u64,
    pub dense_breakdown: DenseCost,
    pub deform_breakdown: DeformCost,
}

#[derive(Debug, Clone, Serialize)]
pub struct DenseCost {
    /// `N_q C^2`
    pub query_proj: u64,
    /// `N_k C^2`
    pub key_proj: u64,
    /// `N_q N_k C`
    pub attention: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeformCost {
    /// `N_q C^2`
    pub output_proj: u64,
    /// `sum_l min(H_l W_l C^2, N_q K C^2)`
    pub value_proj: u64,
    /// `sum_l 5 N_q K C`
    pub sampling: u64,
    /// `3 N_q C M K` per level
    pub param_head: u64,
}

/// Evaluate the cost model for `n_q` queries against a set of levels
/// (`(h, w)` per level; pass one entry for single-scale). The dense model
/// treats all pixels of all levels as keys.
pub fn flop_estimate(cfg: &AttnConfig, n_q: usize, level_sizes: &[(usize, usize)]) -> CostModel {
    let c = cfg.channels as u64;
    let m = cfg.heads as u64;
    let k = cfg.points as u64;
    let nq = n_q as u64;
    let nk: u64 = level_sizes.iter().map(|&(h, w)| (h * w) as u64).sum();

    let dense = DenseCost {
        query_proj: nq * c * c,
        key_proj: nk * c * c,
        attention: nq * nk * c,
    };
    let mut value_proj = 0;
    let mut sampling = 0;
    let mut param_head = 0;
    for &(h, w) in level_sizes {
        let hw = (h * w) as u64;
        value_proj += (hw * c * c).min(nq * k * c * c);
        sampling += 5 * nq * k * c;
        param_head += 3 * nq * c * m * k;
    }
    let deform = DeformCost {
        output_proj: nq * c * c,
        value_proj,
        sampling,
        param_head,
    };
    CostModel {
        flops_dense: dense.query_proj + dense.key_proj + dense.attention,
        flops_deform: deform.output_proj + deform.value_proj + deform.sampling + deform.param_head,
        dense_breakdown: dense,
        deform_breakdown: deform,
    }
}

/// Self-contained finite-difference spot check of the deformable-attention
/// gradients w.r.t. query features, box references, and pyramid values.
/// Used by the CLI's gradcheck command.
pub fn spot_gradcheck(seed: u64) -> Result<crate::kernels::GradReport> {
    use rand::prelude::*;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(99));
    let cfg = AttnConfig::new(2, 8, 2, 2)?;
    let (c, nq) = (cfg.channels, 3usize);
    let mut store = ParamStore::new();
    let p = DeformAttnParams::new(&mut store, &mut rng, "gc", cfg, true);
    for v in store.data.iter_mut() {
        *v = rng.gen_range(-0.3..0.3);
    }

    let dims = [(5usize, 6usize), (3usize, 3usize)];
    let pyramid: Vec<FeatureMap> = dims
        .iter()
        .enumerate()
        .map(|(l, &(h, w))| {
            let mut m = FeatureMap::zeros(c, h, w, l);
            for v in m.data.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            m
        })
        .collect();
    let z: Vec<f64> = (0..nq * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let refs: Vec<f64> = (0..nq)
        .flat_map(|_| {
            [
                rng.gen_range(0.3..0.7),
                rng.gen_range(0.3..0.7),
                rng.gen_range(0.1..0.3),
                rng.gen_range(0.1..0.3),
            ]
        })
        .collect();
    let upstream: Vec<f64> = (0..nq * c).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let (_, cache) = ms_deform_attn_forward(&store, &p, &z, Reference::Boxes(&refs), &pyramid, nq)?;
    let mut gbuf = GradBuf::zeros(&store);
    let grads = ms_deform_attn_backward(&store, &p, &pyramid, &cache, &upstream, &mut gbuf);

    // Pack [z | refs | pyramid values] into one vector and compare.
    let mut x = z.clone();
    x.extend_from_slice(&refs);
    for m in &pyramid {
        x.extend_from_slice(&m.data);
    }
    let mut analytic = grads.z.clone();
    analytic.extend_from_slice(&grads.refs);
    for g in &grads.pyramid {
        analytic.extend_from_slice(g);
    }

    let up = upstream.clone();
    let objective = move |v: &[f64]| -> f64 {
        let z = &v[..nq * c];
        let refs = &v[nq * c..nq * c + nq * 4];
        let mut off = nq * c + nq * 4;
        let pyr: Vec<FeatureMap> = dims
            .iter()
            .enumerate()
            .map(|(l, &(h, w))| {
                let m = FeatureMap::from_vec(v[off..off + c * h * w].to_vec(), c, h, w, l);
                off += c * h * w;
                m
            })
            .collect();
        let (out, _) =
            ms_deform_attn_forward(&store, &p, z, Reference::Boxes(refs), &pyr, nq).unwrap();
        out.iter().zip(&up).map(|(a, b)| a * b).sum()
    };
    crate::kernels::finite_diff_check(objective, &x, &analytic, 1e-5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_tokens(rng: &mut impl Rng, n: usize, c: usize) -> Vec<f64> {
        (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn rand_params(store: &mut ParamStore, p: &DeformAttnParams, rng: &mut impl Rng) {
        for id in [
            p.sampling_offsets.weight,
            p.sampling_offsets.bias.unwrap(),
            p.attn_weights.weight,
            p.attn_weights.bias.unwrap(),
        ] {
            for v in store.get_mut(id) {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }

    fn rand_pyramid(rng: &mut impl Rng, c: usize, dims: &[(usize, usize)]) -> Vec<FeatureMap> {
        dims.iter()
            .enumerate()
            .map(|(l, &(h, w))| {
                FeatureMap::from_vec(
                    (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    c,
                    h,
                    w,
                    l,
                )
            })
            .collect()
    }

    #[test]
    fn single_key_weight_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = AttnConfig::new(2, 8, 1, 1).unwrap();
        let p = DenseAttnParams::new(&mut store, &mut rng, "a", cfg);
        let q = rand_tokens(&mut rng, 3, 8);
        let k = rand_tokens(&mut rng, 1, 8);
        let (_, cache) = dense_attn_forward(&store, &p, &q, &k, &k, 3, 1).unwrap();
        for &a in &cache.attn {
            assert!((a - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_query_proj_gives_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cfg = AttnConfig::new(2, 8, 1, 1).unwrap();
        let p = DenseAttnParams::new(&mut store, &mut rng, "a", cfg);
        for v in store.get_mut(p.u) {
            *v = 0.0;
        }
        let q = rand_tokens(&mut rng, 2, 8);
        let k = rand_tokens(&mut rng, 5, 8);
        let (_, cache) = dense_attn_forward(&store, &p, &q, &k, &k, 2, 5).unwrap();
        for &a in &cache.attn {
            assert!((a - 0.2).abs() < 1e-12);
        }
    }

    /// Independent naive evaluation of the dense formula, head by head,
    /// key by key, straight from the definition.
    fn naive_dense(
        store: &ParamStore,
        p: &DenseAttnParams,
        q: &[f64],
        keys: &[f64],
        nq: usize,
        nk: usize,
    ) -> Vec<f64> {
        let c = p.cfg.channels;
        let m = p.cfg.heads;
        let cv = p.cfg.head_dim;
        let u = store.get(p.u);
        let v = store.get(p.v);
        let w_val = store.get(p.w_val);
        let w_out = store.get(p.w_out);
        let matvec = |w: &[f64], rows: std::ops::Range<usize>, x: &[f64]| -> Vec<f64> {
            rows.map(|r| w[r * c..(r + 1) * c].iter().zip(x).map(|(a, b)| a * b).sum())
                .collect()
        };
        let mut out = vec![0.0; nq * c];
        for qi in 0..nq {
            let zq = &q[qi * c..(qi + 1) * c];
            let mut concat = vec![0.0; c];
            for h in 0..m {
                let uq: Vec<f64> = matvec(u, h * cv..(h + 1) * cv, zq);
                let mut logits = vec![0.0; nk];
                for ki in 0..nk {
                    let xk = &keys[ki * c..(ki + 1) * c];
                    let vk: Vec<f64> = matvec(v, h * cv..(h + 1) * cv, xk);
                    logits[ki] = uq.iter().zip(&vk).map(|(a, b)| a * b).sum::<f64>()
                        / (cv as f64).sqrt();
                }
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for ki in 0..nk {
                    let a = logits[ki].exp() / z;
                    let xk = &keys[ki * c..(ki + 1) * c];
                    let wv: Vec<f64> = matvec(w_val, h * cv..(h + 1) * cv, xk);
                    for i in 0..cv {
                        concat[h * cv + i] += a * wv[i];
                    }
                }
            }
            for r in 0..c {
                out[qi * c + r] = w_out[r * c..(r + 1) * c]
                    .iter()
                    .zip(&concat)
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
        out
    }

    #[test]
    fn dense_matches_naive_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let cfg = AttnConfig::new(2, 8, 1, 1).unwrap();
        let p = DenseAttnParams::new(&mut store, &mut rng, "a", cfg);
        let q = rand_tokens(&mut rng, 3, 8);
        let k = rand_tokens(&mut rng, 5, 8);
        let got = multi_head_attn(&store, &p, &q, &k, 3, 5).unwrap();
        let want = naive_dense(&store, &p, &q, &k, 3, 5);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn dense_permutation_equivariant_over_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = AttnConfig::new(2, 8, 1, 1).unwrap();
        let p = DenseAttnParams::new(&mut store, &mut rng, "a", cfg);
        let q = rand_tokens(&mut rng, 3, 8);
        let k = rand_tokens(&mut rng, 5, 8);
        let base = multi_head_attn(&store, &p, &q, &k, 3, 5).unwrap();
        let mut perm: Vec<usize> = (0..5).collect();
        perm.shuffle(&mut rng);
        let kp: Vec<f64> = perm.iter().flat_map(|&i| k[i * 8..(i + 1) * 8].to_vec()).collect();
        let permuted = multi_head_attn(&store, &p, &q, &kp, 3, 5).unwrap();
        for (a, b) in base.iter().zip(&permuted) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn init_gives_uniform_weights_and_offset_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let cfg = AttnConfig::new(8, 16, 2, 3).unwrap();
        let p = DeformAttnParams::new(&mut store, &mut rng, "d", cfg, false);
        let z = rand_tokens(&mut rng, 4, 16);
        let plan = predict_sampling_params(&store, &p, &z, 4);
        let uniform = 1.0 / (cfg.levels * cfg.points) as f64;
        for &w in &plan.weights {
            assert!((w - uniform).abs() < 1e-12);
        }
        // Head 1 (index 0): (-k, -k); head 5 (index 4): (0, k).
        for l in 0..3 {
            let t0 = SamplingPlan::o_idx(&cfg, 0, 0, l, 0);
            assert_eq!(&plan.offsets[t0..t0 + 2], &[-1.0, -1.0]);
            let t1 = SamplingPlan::o_idx(&cfg, 0, 0, l, 1);
            assert_eq!(&plan.offsets[t1..t1 + 2], &[-2.0, -2.0]);
            let t4 = SamplingPlan::o_idx(&cfg, 0, 4, l, 0);
            assert_eq!(&plan.offsets[t4..t4 + 2], &[0.0, 1.0]);
            let t4b = SamplingPlan::o_idx(&cfg, 0, 4, l, 1);
            assert_eq!(&plan.offsets[t4b..t4b + 2], &[0.0, 2.0]);
        }
    }

    #[test]
    fn init_refinement_scales_by_inv_2k() {
        let cfg = AttnConfig::new(8, 16, 4, 1).unwrap();
        let bias = init_offset_bias(&cfg, true);
        // Head 8 (index 7), k = 3 -> (3, 3) / (2K) = (3/8, 3/8).
        let idx = 2 * (7 * 4 + 2);
        assert!((bias[idx] - 3.0 / 8.0).abs() < 1e-15);
        assert!((bias[idx + 1] - 3.0 / 8.0).abs() < 1e-15);
        let plain = init_offset_bias(&cfg, false);
        assert_eq!(plain[idx], 3.0);
    }

    #[test]
    fn plan_weights_sum_to_one_per_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cfg = AttnConfig::new(4, 8, 3, 2).unwrap();
        let p = DeformAttnParams::new(&mut store, &mut rng, "d", cfg, false);
        rand_params(&mut store, &p, &mut rng);
        let z = rand_tokens(&mut rng, 5, 8);
        let plan = predict_sampling_params(&store, &p, &z, 5);
        let lk = cfg.levels * cfg.points;
        for q in 0..5 {
            for m in 0..4 {
                let base = (q * 4 + m) * lk;
                let s: f64 = plan.weights[base..base + lk].iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn all_out_of_bounds_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let cfg = AttnConfig::new(2, 8, 2, 1).unwrap();
        let p = DeformAttnParams::new(&mut store, &mut rng, "d", cfg, false);
        // Push every sample far outside via the offset bias.
        for v in store.get_mut(p.sampling_offsets.bias.unwrap()) {
            *v = 1000.0;
        }
        let map = FeatureMap::from_vec(
            (0..8 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            8,
            4,
            4,
            0,
        );
        let z = rand_tokens(&mut rng, 3, 8);
        let refs = vec![0.5; 6];
        let (out, _) =
            ms_deform_attn_forward(&store, &p, &z, Reference::Points(&refs), &[map], 3).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn constant_maps_give_projected_constant() {
        // With the deterministic init (weights sum to 1) and constant maps,
        // every sample is the same vector v, so out = W_out W_val v.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let cfg = AttnConfig::new(2, 6, 2, 2).unwrap();
        let p = DeformAttnParams::new(&mut store, &mut rng, "d", cfg, false);
        let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Maps large enough that the init offset grid (|offset| <= K = 2)
        // stays in-bounds from these central references.
        let pyramid: Vec<FeatureMap> = [(9usize, 9usize), (7, 7)]
            .iter()
            .enumerate()
            .map(|(l, &(h, w))| {
                let mut m = FeatureMap::zeros(6, h, w, l);
                #[allow(clippy::needless_range_loop)]
                for c in 0..6 {
                    for y in 0..h {
                        for x in 0..w {
                            *m.at_mut(c, y, x) = v[c];
                        }
                    }
                }
                m
            })
            .collect();
        let z = rand_tokens(&mut rng, 2, 6);
        let refs = vec![0.5, 0.5, 0.4, 0.6];
        let (out, _) =
            ms_deform_attn_forward(&store, &p, &z, Reference::Points(&refs), &pyramid, 2).unwrap();
        // Hand-computed W_out (W_val v).
        let w_val = store.get(p.w_val);
        let w_out = store.get(p.w_out);
        let mut proj = vec![0.0; 6];
        for r in 0..6 {
            proj[r] = w_val[r * 6..(r + 1) * 6].iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let mut want = [0.0; 6];
        for r in 0..6 {
            want[r] = w_out[r * 6..(r + 1) * 6]
                .iter()
                .zip(&proj)
                .map(|(a, b)| a * b)
                .sum();
        }
        for q in 0..2 {
            for c in 0..6 {
                assert!(
                    (out[q * 6 + c] - want[c]).abs() < 1e-10,
                    "q={q} c={c}: {} vs {}",
                    out[q * 6 + c],
                    want[c]
                );
            }
        }
    }

    #[test]
    fn exec_orders_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..20 {
            let mut store = ParamStore::new();
            let cfg = AttnConfig::new(2, 8, 3, 2).unwrap();
            let p = DeformAttnParams::new(
                &mut store,
                &mut rng,
                &format!("d{trial}"),
                cfg,
                false,
            );
            rand_params(&mut store, &p, &mut rng);
            let pyramid = rand_pyramid(&mut rng, 8, &[(6, 6), (3, 3)]);
            let nq = 4;
            let z = rand_tokens(&mut rng, nq, 8);
            let refs: Vec<f64> = (0..nq * 2).map(|_| rng.gen_range(0.1..0.9)).collect();
            let plan = predict_sampling_params(&store, &p, &z, nq);
            let a = ms_deform_attn_core(
                &store,
                &p,
                &plan,
                Reference::Points(&refs),
                &pyramid,
                ExecOrder::ProjectSampled,
            )
            .unwrap();
            let b = ms_deform_attn_core(
                &store,
                &p,
                &plan,
                Reference::Points(&refs),
                &pyramid,
                ExecOrder::ProjectMap,
            )
            .unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn level_count_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let cfg = AttnConfig::new(2, 8, 2, 2).unwrap();
        let p = DeformAttnParams::new(&mut store, &mut rng, "d", cfg, false);
        let pyramid = rand_pyramid(&mut rng, 8, &[(4, 4)]);
        let z = rand_tokens(&mut rng, 1, 8);
        let refs = vec![0.5, 0.5];
        assert!(
            ms_deform_attn_forward(&store, &p, &z, Reference::Points(&refs), &pyramid, 1).is_err()
        );
    }

    #[test]
    fn flop_estimate_scaling_claims() {
        let cfg = AttnConfig::new(8, 64, 4, 1).unwrap();
        // Dense: quadratic growth of the dominant term when N_q = N_k = HW.
        let small = flop_estimate(&cfg, 16 * 16, &[(16, 16)]);
        let big = flop_estimate(&cfg, 32 * 32, &[(32, 32)]);
        let ratio = big.dense_breakdown.attention as f64 / small.dense_breakdown.attention as f64;
        assert!((ratio - 16.0).abs() < 1e-9);

        // Deformable encoder: dominant value term HWC^2 grows 4x on doubling.
        let d_small = flop_estimate(&cfg, 16 * 16, &[(16, 16)]);
        let d_big = flop_estimate(&cfg, 32 * 32, &[(32, 32)]);
        assert_eq!(
            d_small.deform_breakdown.value_proj,
            (16 * 16 * 64 * 64) as u64
        );
        let r = d_big.deform_breakdown.value_proj as f64
            / d_small.deform_breakdown.value_proj as f64;
        assert!((r - 4.0).abs() < 1e-9);

        // Decoder cross-attention: independent of HW once N_q K C^2 < HW C^2.
        let a = flop_estimate(&cfg, 30, &[(32, 32)]);
        let b = flop_estimate(&cfg, 30, &[(64, 64)]);
        assert_eq!(a.flops_deform, b.flops_deform);
    }
}
