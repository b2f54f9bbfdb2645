//! Shared helpers for the integration suites: randomized finite-difference
//! harnesses over the attention operator, box codecs, and set loss.

// Each integration test target compiles this module separately and uses a
// different subset of it.
#![allow(dead_code)]

use ddetr::attention::{
    ms_deform_attn_backward, ms_deform_attn_forward, AttnConfig, DeformAttnParams, Reference,
};
use ddetr::kernels::{finite_diff_check, FeatureMap, GradReport};
use ddetr::param::{GradBuf, ParamStore};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Full finite-difference check of multi-scale deformable attention w.r.t.
/// every parameter tensor and every input (queries, references, pyramid
/// values) on one random instance. References are boxes when `use_boxes`.
pub fn deform_attn_full_gradcheck(seed: u64, use_boxes: bool) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = *[1usize, 2].choose(&mut rng).unwrap();
    let cfg = AttnConfig::new(heads, 8, rng.gen_range(1..=3), 2).unwrap();
    let nq = rng.gen_range(1..=3);
    let c = cfg.channels;
    let mut store = ParamStore::new();
    let refinement = rng.gen_bool(0.5);
    let p = DeformAttnParams::new(&mut store, &mut rng, "fd", cfg, refinement);
    for v in store.data.iter_mut() {
        *v = rng.gen_range(-0.3..0.3);
    }

    let dims = [
        (rng.gen_range(4..=6), rng.gen_range(4..=6)),
        (rng.gen_range(2..=3), rng.gen_range(2..=3)),
    ];
    let pyramid: Vec<FeatureMap> = dims
        .iter()
        .enumerate()
        .map(|(l, &(h, w))| {
            FeatureMap::from_vec(rand_vec(&mut rng, c * h * w, -1.0, 1.0), c, h, w, l)
        })
        .collect();
    let z = rand_vec(&mut rng, nq * c, -1.0, 1.0);
    let per_ref = if use_boxes { 4 } else { 2 };
    let refs: Vec<f64> = (0..nq)
        .flat_map(|_| {
            if use_boxes {
                vec![
                    rng.gen_range(0.3..0.7),
                    rng.gen_range(0.3..0.7),
                    rng.gen_range(0.1..0.3),
                    rng.gen_range(0.1..0.3),
                ]
            } else {
                vec![rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75)]
            }
        })
        .collect();
    let upstream = rand_vec(&mut rng, nq * c, -1.0, 1.0);
    let reference = if use_boxes {
        Reference::Boxes(&refs)
    } else {
        Reference::Points(&refs)
    };

    let (_, cache) = ms_deform_attn_forward(&store, &p, &z, reference, &pyramid, nq).unwrap();
    let mut gbuf = GradBuf::zeros(&store);
    let grads = ms_deform_attn_backward(&store, &p, &pyramid, &cache, &upstream, &mut gbuf);

    // Pack [all parameters | z | refs | pyramid values] and diff everything.
    let n_params = store.data.len();
    let mut x = store.data.clone();
    x.extend_from_slice(&z);
    x.extend_from_slice(&refs);
    for m in &pyramid {
        x.extend_from_slice(&m.data);
    }
    let mut analytic = gbuf.0.clone();
    analytic.extend_from_slice(&grads.z);
    analytic.extend_from_slice(&grads.refs);
    for g in &grads.pyramid {
        analytic.extend_from_slice(g);
    }

    let mut probe = ParamStore::new();
    let p2 = DeformAttnParams::new(&mut probe, &mut rng, "fd", cfg, false);
    let objective = move |v: &[f64]| -> f64 {
        probe.data.copy_from_slice(&v[..n_params]);
        let z = &v[n_params..n_params + nq * c];
        let refs = &v[n_params + nq * c..n_params + nq * c + nq * per_ref];
        let mut off = n_params + nq * (c + per_ref);
        let pyr: Vec<FeatureMap> = dims
            .iter()
            .enumerate()
            .map(|(l, &(h, w))| {
                let m = FeatureMap::from_vec(v[off..off + c * h * w].to_vec(), c, h, w, l);
                off += c * h * w;
                m
            })
            .collect();
        let r = if use_boxes {
            Reference::Boxes(refs)
        } else {
            Reference::Points(refs)
        };
        let (out, _) = ms_deform_attn_forward(&probe, &p2, z, r, &pyr, nq).unwrap();
        out.iter().zip(&upstream).map(|(a, b)| a * b).sum()
    };
    finite_diff_check(objective, &x, &analytic, FD_STEP).unwrap()
}

/// Finite-difference check of the box decode path on one random instance:
/// raw deltas and reference points both perturbed.
pub fn decode_box_gradcheck(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let rp = [rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)];
    let up: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let (g_raw, g_ref) = ddetr::boxes::decode_box_grad(rp[0], rp[1], &raw, &up);
    let mut x = raw.clone();
    x.extend_from_slice(&rp);
    let mut analytic = g_raw.to_vec();
    analytic.extend_from_slice(&g_ref);

    let objective = move |v: &[f64]| -> f64 {
        let b = ddetr::boxes::decode_box(v[4], v[5], &v[0..4]);
        [b.cx, b.cy, b.w, b.h]
            .iter()
            .zip(&up)
            .map(|(a, u)| a * u)
            .sum()
    };
    finite_diff_check(objective, &x, &analytic, FD_STEP).unwrap()
}

/// Finite-difference check of a two-step refinement chain w.r.t. the final
/// delta (the live path). Also returns the true (finite-difference)
/// sensitivity of the output to the first delta, which the implementation
/// deliberately blocks: its analytic gradient through the chain is zero by
/// construction even though the mathematical derivative is not.
pub fn refine_box_gradcheck(seed: u64) -> (GradReport, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prev = ddetr::boxes::BoxN::new(
        rng.gen_range(0.2..0.8),
        rng.gen_range(0.2..0.8),
        rng.gen_range(0.1..0.4),
        rng.gen_range(0.1..0.4),
    );
    let d0: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.8..0.8)).collect();
    let d1: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.8..0.8)).collect();
    let up: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));

    let mid = ddetr::boxes::refine_box(prev, &d0);
    let g_d1 = ddetr::boxes::refine_box_grad(mid, &d1, &up);
    let obj_d1 = {
        move |v: &[f64]| -> f64 {
            let b = ddetr::boxes::refine_box(mid, v);
            [b.cx, b.cy, b.w, b.h]
                .iter()
                .zip(&up)
                .map(|(a, u)| a * u)
                .sum()
        }
    };
    let report = finite_diff_check(obj_d1, &d1, &g_d1, FD_STEP).unwrap();

    // True sensitivity to d0[0] through the chain (nonzero), which the
    // blocked backward discards.
    let h = 1e-5;
    let chain = |d00: f64| -> f64 {
        let mut d0v = d0.clone();
        d0v[0] = d00;
        let b = ddetr::boxes::refine_box(ddetr::boxes::refine_box(prev, &d0v), &d1);
        [b.cx, b.cy, b.w, b.h]
            .iter()
            .zip(&up)
            .map(|(a, u)| a * u)
            .sum()
    };
    let fd_d0 = (chain(d0[0] + h) - chain(d0[0] - h)) / (2.0 * h);
    (report, fd_d0)
}

/// Finite-difference check of the set loss through a linear classification
/// head and a linear box head on one random instance. The Hungarian
/// assignment is locally constant, so the loss is differentiable at
/// generic points.
pub fn set_loss_gradcheck(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nq, nc, c) = (5usize, 3usize, 6usize);
    let n_gt = rng.gen_range(1..=3);
    let w = ddetr::loss::LossWeights::default();

    // Head inputs and weights; boxes go through a sigmoid to stay valid.
    let feats = rand_vec(&mut rng, nq * c, -1.0, 1.0);
    let w_cls = rand_vec(&mut rng, nc * c, -0.5, 0.5);
    let w_box = rand_vec(&mut rng, 4 * c, -0.5, 0.5);
    let gt_classes: Vec<usize> = (0..n_gt).map(|_| rng.gen_range(0..nc)).collect();
    let gt_boxes: Vec<f64> = (0..n_gt)
        .flat_map(|_| {
            [
                rng.gen_range(0.25..0.75),
                rng.gen_range(0.25..0.75),
                rng.gen_range(0.1..0.35),
                rng.gen_range(0.1..0.35),
            ]
        })
        .collect();

    let eval = |feats: &[f64], w_cls: &[f64], w_box: &[f64]| {
        let mut logits = vec![0.0; nq * nc];
        let mut boxes = vec![0.0; nq * 4];
        for q in 0..nq {
            let f = &feats[q * c..(q + 1) * c];
            for j in 0..nc {
                logits[q * nc + j] = w_cls[j * c..(j + 1) * c]
                    .iter()
                    .zip(f)
                    .map(|(a, b)| a * b)
                    .sum();
            }
            for j in 0..4 {
                let raw: f64 = w_box[j * c..(j + 1) * c]
                    .iter()
                    .zip(f)
                    .map(|(a, b)| a * b)
                    .sum();
                boxes[q * 4 + j] = 1.0 / (1.0 + (-raw).exp());
            }
        }
        (logits, boxes)
    };

    let (logits, boxes) = eval(&feats, &w_cls, &w_box);
    let out = ddetr::loss::set_loss(&logits, &boxes, nq, nc, &gt_classes, &gt_boxes, &w).unwrap();

    // Chain the loss gradients back through the heads by hand.
    let mut analytic = vec![0.0; feats.len() + w_cls.len() + w_box.len()];
    for q in 0..nq {
        for j in 0..nc {
            let g = out.grad_logits[q * nc + j];
            for ch in 0..c {
                analytic[q * c + ch] += g * w_cls[j * c + ch];
                analytic[feats.len() + j * c + ch] += g * feats[q * c + ch];
            }
        }
        for j in 0..4 {
            let s = boxes[q * 4 + j];
            let g = out.grad_boxes[q * 4 + j] * s * (1.0 - s);
            for ch in 0..c {
                analytic[q * c + ch] += g * w_box[j * c + ch];
                analytic[feats.len() + w_cls.len() + j * c + ch] += g * feats[q * c + ch];
            }
        }
    }

    let mut x = feats.clone();
    x.extend_from_slice(&w_cls);
    x.extend_from_slice(&w_box);
    let objective = move |v: &[f64]| -> f64 {
        let (f, rest) = v.split_at(nq * c);
        let (wc, wb) = rest.split_at(nc * c);
        let (logits, boxes) = eval(f, wc, wb);
        ddetr::loss::set_loss(&logits, &boxes, nq, nc, &gt_classes, &gt_boxes, &w)
            .unwrap()
            .parts
            .total
    };
    finite_diff_check(objective, &x, &analytic, FD_STEP).unwrap()
}

// ---------------------------------------------------------------------------
// Equivalence oracles (independent reimplementations)
// ---------------------------------------------------------------------------

use ddetr::attention::{
    dense_attn_forward, deform_attn, ms_deform_attn_core, predict_sampling_params, DenseAttnParams,
    ExecOrder, SamplingPlan,
};

/// Independent bilinear lookup with zero padding outside the map,
/// deliberately written differently from the library kernel.
fn naive_bilerp(map: &FeatureMap, x: f64, y: f64, ch: usize) -> f64 {
    let (h, w) = (map.height as isize, map.width as isize);
    let x0 = x.floor();
    let y0 = y.floor();
    let mut acc = 0.0;
    for (ix, wx) in [(x0 as isize, 1.0 - (x - x0)), (x0 as isize + 1, x - x0)] {
        for (iy, wy) in [(y0 as isize, 1.0 - (y - y0)), (y0 as isize + 1, y - y0)] {
            if ix >= 0 && ix < w && iy >= 0 && iy < h {
                acc += wx * wy * map.data[(ch * map.height + iy as usize) * map.width + ix as usize];
            }
        }
    }
    acc
}

fn mat_vec(w: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Single-scale degeneration: with one level the operator is a deformable-
/// convolution-style gather — per head, K bilinear taps at predicted
/// offsets around the query's own pixel, softmax-weighted, then linearly
/// projected. The oracle recomputes that from raw parameters. Returns the
/// max abs deviation over the instance.
pub fn single_scale_gather_oracle_diff(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
    let heads = *[1usize, 2, 4].choose(&mut rng).unwrap();
    let cfg = AttnConfig::new(heads, 8, rng.gen_range(1..=4), 1).unwrap();
    let (c, cv, kk) = (cfg.channels, cfg.head_dim, cfg.points);
    let mut store = ParamStore::new();
    let p = DeformAttnParams::new(&mut store, &mut rng, "ds", cfg, false);
    for v in store.data.iter_mut() {
        *v = rng.gen_range(-0.4..0.4);
    }

    let (h, w) = (rng.gen_range(5..9), rng.gen_range(5..9));
    let map = FeatureMap::from_vec(rand_vec(&mut rng, c * h * w, -1.0, 1.0), c, h, w, 0);
    let nq = rng.gen_range(1..=4);
    let z = rand_vec(&mut rng, nq * c, -1.0, 1.0);
    let refs_pixel: Vec<f64> = (0..nq)
        .flat_map(|_| {
            [
                rng.gen_range(0.0..(w - 1) as f64),
                rng.gen_range(0.0..(h - 1) as f64),
            ]
        })
        .collect();

    let got = deform_attn(&store, &p, &z, &refs_pixel, &map, nq).unwrap();

    // Oracle: everything from first principles.
    let off_w = store.get(store.find("ds.sampling_offsets.weight").unwrap());
    let off_b = store.get(store.find("ds.sampling_offsets.bias").unwrap());
    let wt_w = store.get(store.find("ds.attn_weights.weight").unwrap());
    let wt_b = store.get(store.find("ds.attn_weights.bias").unwrap());
    let w_val = store.get(p.w_val);
    let w_out = store.get(p.w_out);
    let mut worst = 0.0f64;
    for q in 0..nq {
        let zq = &z[q * c..(q + 1) * c];
        let mut offsets = mat_vec(off_w, zq, 2 * heads * kk, c);
        for (o, b) in offsets.iter_mut().zip(off_b) {
            *o += b;
        }
        let mut logits = mat_vec(wt_w, zq, heads * kk, c);
        for (o, b) in logits.iter_mut().zip(wt_b) {
            *o += b;
        }
        let mut heads_out = vec![0.0; c];
        for m in 0..heads {
            let lg = &logits[m * kk..(m + 1) * kk];
            let mx = lg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = lg.iter().map(|v| (v - mx).exp()).collect();
            let norm: f64 = exps.iter().sum();
            for k in 0..kk {
                let ox = offsets[2 * (m * kk + k)];
                let oy = offsets[2 * (m * kk + k) + 1];
                let px = refs_pixel[2 * q] + ox;
                let py = refs_pixel[2 * q + 1] + oy;
                let sampled: Vec<f64> = (0..c).map(|ch| naive_bilerp(&map, px, py, ch)).collect();
                let a = exps[k] / norm;
                for r in 0..cv {
                    let row = &w_val[(m * cv + r) * c..(m * cv + r + 1) * c];
                    let v: f64 = row.iter().zip(&sampled).map(|(x, y)| x * y).sum();
                    heads_out[m * cv + r] += a * v;
                }
            }
        }
        let want = mat_vec(w_out, &heads_out, c, c);
        for (g, e) in got[q * c..(q + 1) * c].iter().zip(&want) {
            worst = worst.max((g - e).abs());
        }
    }
    worst
}

/// Full-coverage equivalence: with K covering every pixel of a single
/// level, references pinned to the origin, attention weights copied from a
/// dense attention's softmax, and shared value/output projections, the
/// deformable operator reproduces dense attention exactly. Returns the max
/// abs deviation across both execution orders.
pub fn full_coverage_dense_diff(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
    let heads = *[1usize, 2, 4].choose(&mut rng).unwrap();
    let c = 8;
    let (h, w) = (rng.gen_range(2..5), rng.gen_range(2..5));
    let t = h * w;
    let dcfg = AttnConfig::new(heads, c, t, 1).unwrap();

    let mut store = ParamStore::new();
    let dense = DenseAttnParams::new(&mut store, &mut rng, "dn", dcfg);
    let deform = DeformAttnParams::new(&mut store, &mut rng, "df", dcfg, false);
    for v in store.data.iter_mut() {
        *v = rng.gen_range(-0.4..0.4);
    }
    // Shared value and output projections.
    let (wv, wo) = (store.get(dense.w_val).to_vec(), store.get(dense.w_out).to_vec());
    store.get_mut(deform.w_val).copy_from_slice(&wv);
    store.get_mut(deform.w_out).copy_from_slice(&wo);

    // Tokens of the dense stream are the pixels of the map, row-major.
    let z = rand_vec(&mut rng, t * c, -1.0, 1.0);
    let mut map = FeatureMap::zeros(c, h, w, 0);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                map.data[(ch * h + y) * w + x] = z[(y * w + x) * c + ch];
            }
        }
    }

    let nq = rng.gen_range(1..=3);
    let zq = rand_vec(&mut rng, nq * c, -1.0, 1.0);
    let (want, cache) = dense_attn_forward(&store, &dense, &zq, &z, &z, nq, t).unwrap();

    // Sampling plan: tap k lands exactly on pixel k; weights are the dense
    // softmax probabilities.
    let refs = vec![0.0; nq * 2];
    let mut plan = SamplingPlan {
        nq,
        offsets: vec![0.0; nq * heads * t * 2],
        weights: vec![0.0; nq * heads * t],
    };
    for q in 0..nq {
        for m in 0..heads {
            for k in 0..t {
                let i = SamplingPlan::w_idx(&dcfg, q, m, 0, k);
                plan.offsets[2 * i] = (k % w) as f64;
                plan.offsets[2 * i + 1] = (k / w) as f64;
                plan.weights[i] = cache.attn[(q * heads + m) * t + k];
            }
        }
    }
    let mut worst = 0.0f64;
    for order in [ExecOrder::ProjectSampled, ExecOrder::ProjectMap] {
        let got = ms_deform_attn_core(
            &store,
            &deform,
            &plan,
            Reference::Points(&refs),
            std::slice::from_ref(&map),
            order,
        )
        .unwrap();
        for (g, e) in got.iter().zip(&want) {
            worst = worst.max((g - e).abs());
        }
    }
    worst
}

/// The two execution orders (project each sampled vector vs project the
/// whole map first) are algebraically identical; returns the max abs
/// deviation between them on a random multi-scale instance.
pub fn exec_order_diff(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3100 + seed);
    let heads = *[1usize, 2].choose(&mut rng).unwrap();
    let cfg = AttnConfig::new(heads, 8, rng.gen_range(1..=4), 2).unwrap();
    let c = cfg.channels;
    let mut store = ParamStore::new();
    let p = DeformAttnParams::new(&mut store, &mut rng, "eo", cfg, false);
    for v in store.data.iter_mut() {
        *v = rng.gen_range(-0.4..0.4);
    }
    let dims = [(rng.gen_range(4..8), rng.gen_range(4..8)), (3, 3)];
    let pyramid: Vec<FeatureMap> = dims
        .iter()
        .enumerate()
        .map(|(l, &(h, w))| {
            FeatureMap::from_vec(rand_vec(&mut rng, c * h * w, -1.0, 1.0), c, h, w, l)
        })
        .collect();
    let nq = rng.gen_range(1..=4);
    let z = rand_vec(&mut rng, nq * c, -1.0, 1.0);
    let refs: Vec<f64> = rand_vec(&mut rng, nq * 2, 0.1, 0.9);
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
    a.iter()
        .zip(&b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
