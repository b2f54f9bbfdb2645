//! Complexity benchmark: measured multiply-accumulate counts for the two
//! attention operators across a sweep of feature-map sizes, compared with
//! the analytic cost model, plus fitted log-log scaling exponents.

use crate::attention::{
    dense_attn_forward, flop_estimate, ms_deform_attn_core, ms_deform_attn_forward,
    predict_sampling_params, AttnConfig, DenseAttnParams, DeformAttnParams, ExecOrder, Reference,
};
use crate::kernels::FeatureMap;
use crate::macs;
use crate::param::ParamStore;
use crate::Result;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct BenchConfig {
    pub channels: usize,
    pub heads: usize,
    pub points: usize,
    pub levels: usize,
    /// Finest-level heights to sweep (width = height; coarser levels halve).
    pub base_sizes: Vec<usize>,
    /// Decoder query count for the fixed-query measurement.
    pub n_queries: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            heads: 4,
            points: 4,
            levels: 4,
            base_sizes: vec![8, 16, 24, 32],
            n_queries: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchPoint {
    pub base_size: usize,
    pub tokens: usize,
    /// Encoder-style self-attention: every token is a query.
    pub deform_encoder_macs: u64,
    pub dense_encoder_macs: u64,
    /// Decoder-style cross-attention: fixed query count.
    pub deform_decoder_macs: u64,
    pub est_deform_encoder: u64,
    pub est_dense_encoder: u64,
    pub est_deform_decoder: u64,
    pub wall_ms_deform_encoder: f64,
    pub wall_ms_dense_encoder: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub points: Vec<BenchPoint>,
    /// Fitted d ln(MACs) / d ln(tokens).
    pub exponent_deform_encoder: f64,
    pub exponent_dense_encoder: f64,
    pub exponent_deform_decoder: f64,
    /// max over points of measured / estimated.
    pub worst_ratio_deform: f64,
    pub worst_ratio_dense: f64,
}

/// Least-squares slope of ln(y) against ln(x).
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

fn level_sizes(base: usize, levels: usize) -> Vec<(usize, usize)> {
    (0..levels)
        .map(|l| {
            let s = (base >> l).max(1);
            (s, s)
        })
        .collect()
}

fn random_pyramid(rng: &mut ChaCha8Rng, c: usize, dims: &[(usize, usize)]) -> Vec<FeatureMap> {
    dims.iter()
        .enumerate()
        .map(|(l, &(h, w))| {
            let mut map = FeatureMap::zeros(c, h, w, l);
            for v in map.data.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            map
        })
        .collect()
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    let acfg = AttnConfig::new(cfg.heads, cfg.channels, cfg.points, cfg.levels)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let deform = DeformAttnParams::new(&mut store, &mut rng, "bench.deform", acfg, false);
    let dense = DenseAttnParams::new(&mut store, &mut rng, "bench.dense", acfg);
    // The zero-initialized sampling head short-circuits nothing cost-wise,
    // but give it nonzero weights anyway so the measurement reflects real
    // inference.
    for name in ["bench.deform.sampling_offsets.weight", "bench.deform.attn_weights.weight"] {
        let id = store.find(name).unwrap();
        for v in store.get_mut(id).iter_mut() {
            *v = rng.gen_range(-0.05..0.05);
        }
    }

    let c = cfg.channels;
    let mut points = Vec::new();
    for &base in &cfg.base_sizes {
        let dims = level_sizes(base, cfg.levels);
        let pyramid = random_pyramid(&mut rng, c, &dims);
        let tokens: usize = dims.iter().map(|&(h, w)| h * w).sum();

        // Token features and per-pixel references for the encoder case.
        let z: Vec<f64> = (0..tokens * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut refs = Vec::with_capacity(tokens * 2);
        for &(h, w) in &dims {
            for y in 0..h {
                for x in 0..w {
                    refs.push(x as f64 / (w.max(2) - 1) as f64);
                    refs.push(y as f64 / (h.max(2) - 1) as f64);
                }
            }
        }

        // Encoder case: every token queries, so projecting the maps once is
        // the cheaper execution order (and the one the cost model assumes).
        macs::reset();
        let t0 = std::time::Instant::now();
        let plan = predict_sampling_params(&store, &deform, &z, tokens);
        ms_deform_attn_core(
            &store,
            &deform,
            &plan,
            Reference::Points(&refs),
            &pyramid,
            ExecOrder::ProjectMap,
        )?;
        let wall_deform = t0.elapsed().as_secs_f64() * 1e3;
        let deform_encoder_macs = macs::take();

        let t0 = std::time::Instant::now();
        dense_attn_forward(&store, &dense, &z, &z, &z, tokens, tokens)?;
        let wall_dense = t0.elapsed().as_secs_f64() * 1e3;
        let dense_encoder_macs = macs::take();

        let nq = cfg.n_queries;
        let zq: Vec<f64> = (0..nq * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rq: Vec<f64> = (0..nq * 2).map(|_| rng.gen_range(0.0..1.0)).collect();
        macs::reset();
        ms_deform_attn_forward(&store, &deform, &zq, Reference::Points(&rq), &pyramid, nq)?;
        let deform_decoder_macs = macs::take();

        let est_enc = flop_estimate(&acfg, tokens, &dims);
        let est_dec = flop_estimate(&acfg, nq, &dims);
        points.push(BenchPoint {
            base_size: base,
            tokens,
            deform_encoder_macs,
            dense_encoder_macs,
            deform_decoder_macs,
            est_deform_encoder: est_enc.flops_deform,
            est_dense_encoder: est_enc.flops_dense,
            est_deform_decoder: est_dec.flops_deform,
            wall_ms_deform_encoder: wall_deform,
            wall_ms_dense_encoder: wall_dense,
        });
    }

    let toks: Vec<f64> = points.iter().map(|p| p.tokens as f64).collect();
    let de: Vec<f64> = points.iter().map(|p| p.deform_encoder_macs as f64).collect();
    let dn: Vec<f64> = points.iter().map(|p| p.dense_encoder_macs as f64).collect();
    let dd: Vec<f64> = points.iter().map(|p| p.deform_decoder_macs as f64).collect();
    let ratio = |m: u64, e: u64| m as f64 / e as f64;
    let worst = |f: fn(&BenchPoint) -> (u64, u64), pts: &[BenchPoint]| {
        pts.iter()
            .map(|p| {
                let (m, e) = f(p);
                let r = ratio(m, e);
                r.max(1.0 / r)
            })
            .fold(0.0f64, f64::max)
    };
    Ok(BenchReport {
        config: cfg.clone(),
        exponent_deform_encoder: log_log_slope(&toks, &de),
        exponent_dense_encoder: log_log_slope(&toks, &dn),
        exponent_deform_decoder: log_log_slope(&toks, &dd),
        worst_ratio_deform: worst(
            |p| (p.deform_encoder_macs, p.est_deform_encoder),
            &points,
        ),
        worst_ratio_dense: worst(|p| (p.dense_encoder_macs, p.est_dense_encoder), &points),
        points,
    })
}
