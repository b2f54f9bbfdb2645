//! The full detector: conv stem, multi-scale encoder, query decoder with
//! optional box refinement or two-stage proposals, prediction heads, and a
//! hand-written backward pass over the entire graph.

use crate::attention::{
    dense_attn_backward, dense_attn_forward, ms_deform_attn_backward, ms_deform_attn_forward,
    AttnConfig, DenseAttnCache, DenseAttnParams, DeformAttnParams, MsDeformCache, Reference,
};
use crate::boxes::{
    decode_box, decode_box_grad, initial_box, propose_box, propose_box_grad, refine_box,
    refine_box_grad, top_k_proposals, BoxN, DEFAULT_BASE_SCALE,
};
use crate::kernels::{sigmoid, sigmoid_grad, FeatureMap};
use crate::nn::{LayerNorm, LayerNormCache, Linear, Mlp, MlpCache};
use crate::param::{GradBuf, ParamId, ParamStore};
use crate::pyramid::{
    attach_embeddings, sine_box_embedding, sine_positional_embedding, FeaturePyramid,
    ScaleEmbeds, Stem,
};
use crate::{DdError, Result};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Decoder box handling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Fixed reference points, boxes decoded once per layer from the same
    /// references.
    Plain,
    /// Per-layer box refinement with gradient-blocked chaining.
    Refine,
    /// Encoder proposals seed the decoder queries; refinement on top.
    TwoStage,
}

/// Which attention operator the encoder and decoder cross-attention use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnKind {
    Deformable,
    Dense,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub channels: usize,
    pub heads: usize,
    pub points: usize,
    pub levels: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub n_queries: usize,
    pub n_classes: usize,
    pub ffn_dim: usize,
    pub mode: Mode,
    pub attn: AttnKind,
    /// Initial box width/height (normalized) for refinement before the first
    /// decoder layer has produced any size estimate.
    pub box_size_prior: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            heads: 8,
            points: 4,
            levels: 4,
            enc_layers: 2,
            dec_layers: 2,
            n_queries: 16,
            n_classes: 3,
            ffn_dim: 128,
            mode: Mode::Refine,
            attn: AttnKind::Deformable,
            box_size_prior: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.channels.is_multiple_of(self.heads) {
            return Err(DdError::Config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if !self.channels.is_multiple_of(4) {
            return Err(DdError::Config(
                "channels must be a multiple of 4 for the positional embedding".into(),
            ));
        }
        if self.n_queries == 0 || self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(DdError::Config("empty model".into()));
        }
        if !(self.box_size_prior > 0.0 && self.box_size_prior < 1.0) {
            return Err(DdError::Config(format!(
                "box size prior {} outside (0, 1)",
                self.box_size_prior
            )));
        }
        AttnConfig::new(self.heads, self.channels, self.points, self.levels)?;
        Ok(())
    }

    fn attn_cfg(&self) -> AttnConfig {
        AttnConfig::new(self.heads, self.channels, self.points, self.levels).unwrap()
    }

    /// Single-level config for decoder self-attention over queries.
    fn self_attn_cfg(&self) -> AttnConfig {
        AttnConfig::new(self.heads, self.channels, self.points, 1).unwrap()
    }

    fn refines(&self) -> bool {
        matches!(self.mode, Mode::Refine | Mode::TwoStage)
    }
}

/// Either attention operator behind one interface.
pub enum AnyAttn {
    Deform(DeformAttnParams),
    Dense(DenseAttnParams),
}

enum AttnCache {
    Deform(MsDeformCache),
    Dense(DenseAttnCache),
}

pub struct EncoderLayer {
    pub attn: AnyAttn,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
}

pub struct DecoderLayer {
    pub self_attn: DenseAttnParams,
    pub norm1: LayerNorm,
    pub cross: AnyAttn,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
    pub norm3: LayerNorm,
}

/// Classification + box heads for one prediction point.
pub struct Heads {
    pub class: Linear,
    pub bbox: Mlp,
}

impl Heads {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        n_classes: usize,
    ) -> Self {
        let class = Linear::new(store, rng, &format!("{name}.class"), channels, n_classes, true);
        // Bias the classifier toward background so early focal loss is not
        // dominated by a sea of confident false positives.
        let prior = -(99.0f64).ln();
        if let Some(b) = class.bias {
            store.get_mut(b).fill(prior);
        }
        let bbox = Mlp::new(
            store,
            rng,
            &format!("{name}.bbox"),
            &[channels, channels, channels, 4],
        );
        Self { class, bbox }
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub stem: Stem,
    pub scale_embeds: ScaleEmbeds,
    pub enc: Vec<EncoderLayer>,
    pub dec: Vec<DecoderLayer>,
    /// Learned query embeddings `[n_queries, C]` (absent in two-stage mode,
    /// where proposals supply the query positions).
    pub query_embed: Option<ParamId>,
    /// Projects query embeddings to initial reference points (0.1x lr).
    pub ref_proj: Option<Linear>,
    /// One per decoder layer when refining, otherwise a single shared head.
    pub heads: Vec<Heads>,
    /// Two-stage proposal head over encoder tokens (binary objectness).
    pub first_stage: Option<Heads>,
    /// Two-stage: projects the proposal box embedding to the concatenated
    /// `[query position | initial query feature]` pair.
    pub query_trans: Option<Linear>,
    pub query_trans_norm: Option<LayerNorm>,
}

impl Model {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let stem = Stem::new(store, rng, "stem", c, cfg.levels)?;
        let scale_embeds = ScaleEmbeds::new(store, rng, "enc", cfg.levels, c);
        let acfg = cfg.attn_cfg();

        let mut enc = Vec::with_capacity(cfg.enc_layers);
        for i in 0..cfg.enc_layers {
            let name = format!("enc.{i}");
            let attn = match cfg.attn {
                AttnKind::Deformable => AnyAttn::Deform(DeformAttnParams::new(
                    store,
                    rng,
                    &format!("{name}.attn"),
                    acfg,
                    false,
                )),
                AttnKind::Dense => {
                    AnyAttn::Dense(DenseAttnParams::new(store, rng, &format!("{name}.attn"), acfg))
                }
            };
            enc.push(EncoderLayer {
                attn,
                norm1: LayerNorm::new(store, rng, &format!("{name}.norm1"), c),
                ffn: Mlp::new(store, rng, &format!("{name}.ffn"), &[c, cfg.ffn_dim, c]),
                norm2: LayerNorm::new(store, rng, &format!("{name}.norm2"), c),
            });
        }

        let mut dec = Vec::with_capacity(cfg.dec_layers);
        for i in 0..cfg.dec_layers {
            let name = format!("dec.{i}");
            let cross = match cfg.attn {
                AttnKind::Deformable => AnyAttn::Deform(DeformAttnParams::new(
                    store,
                    rng,
                    &format!("{name}.cross"),
                    acfg,
                    cfg.refines(),
                )),
                AttnKind::Dense => {
                    AnyAttn::Dense(DenseAttnParams::new(store, rng, &format!("{name}.cross"), acfg))
                }
            };
            dec.push(DecoderLayer {
                self_attn: DenseAttnParams::new(
                    store,
                    rng,
                    &format!("{name}.self"),
                    cfg.self_attn_cfg(),
                ),
                norm1: LayerNorm::new(store, rng, &format!("{name}.norm1"), c),
                cross,
                norm2: LayerNorm::new(store, rng, &format!("{name}.norm2"), c),
                ffn: Mlp::new(store, rng, &format!("{name}.ffn"), &[c, cfg.ffn_dim, c]),
                norm3: LayerNorm::new(store, rng, &format!("{name}.norm3"), c),
            });
        }

        let (query_embed, ref_proj) = if cfg.mode == Mode::TwoStage {
            (None, None)
        } else {
            let q = store.alloc(
                "query_embed",
                &[cfg.n_queries, c],
                crate::param::Init::Normal(1.0),
                rng,
            );
            let r = Linear::with_lr(store, rng, "ref_proj", c, 2, true, 0.1);
            (Some(q), Some(r))
        };

        let n_heads = if cfg.refines() { cfg.dec_layers } else { 1 };
        let heads = (0..n_heads)
            .map(|i| Heads::new(store, rng, &format!("head.{i}"), c, cfg.n_classes))
            .collect();
        let first_stage = (cfg.mode == Mode::TwoStage)
            .then(|| Heads::new(store, rng, "first_stage", c, 1));
        let (query_trans, query_trans_norm) = if cfg.mode == Mode::TwoStage {
            (
                Some(Linear::new(store, rng, "query_trans", c, 2 * c, true)),
                Some(LayerNorm::new(store, rng, "query_trans_norm", 2 * c)),
            )
        } else {
            (None, None)
        };

        Ok(Self {
            cfg: cfg.clone(),
            stem,
            scale_embeds,
            enc,
            dec,
            query_embed,
            ref_proj,
            heads,
            first_stage,
            query_trans,
            query_trans_norm,
        })
    }

    fn head_for(&self, layer: usize) -> &Heads {
        if self.cfg.refines() {
            &self.heads[layer]
        } else {
            &self.heads[0]
        }
    }

    /// Initial decoder reference points `[n_queries, 2]` (plain / refine
    /// modes): a sigmoid-squashed linear read of the query embeddings.
    pub fn reference_points(&self, store: &ParamStore) -> (Vec<f64>, Vec<f64>) {
        let q = store.get(self.query_embed.expect("two-stage mode has no reference head"));
        let logits = self
            .ref_proj
            .as_ref()
            .unwrap()
            .forward(store, q, self.cfg.n_queries);
        let refs = crate::param::sigmoid_slice(&logits);
        (refs, logits)
    }
}

/// Predictions of one decoder layer (or the two-stage first stage).
#[derive(Debug, Clone)]
pub struct LayerPreds {
    /// `[n, n_classes]` logits.
    pub class_logits: Vec<f64>,
    /// `[n, 4]` normalized boxes.
    pub boxes: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub layer_preds: Vec<LayerPreds>,
    /// Two-stage proposal predictions over all encoder tokens (objectness
    /// logits `[T, 1]`, boxes `[T, 4]`).
    pub first_stage: Option<LayerPreds>,
    /// Initial decoder references: `[N, 2]` points, or `[N, 4]` proposal
    /// boxes in two-stage mode.
    pub init_references: Vec<f64>,
}

struct EncLayerCache {
    value_pyr: Vec<FeatureMap>,
    attn: AttnCache,
    ln1: LayerNormCache,
    ffn: MlpCache,
    ln2: LayerNormCache,
}

struct DecLayerCache {
    self_cache: DenseAttnCache,
    ln1: LayerNormCache,
    cross: AttnCache,
    /// Whether reference gradients from cross-attention flow anywhere.
    refs_live: bool,
    ln2: LayerNormCache,
    ffn: MlpCache,
    ln3: LayerNormCache,
    tgt_out: Vec<f64>,
    bbox: MlpCache,
    raw: Vec<f64>,
    /// Box each query refined from (refine / two-stage modes).
    prev_boxes: Vec<f64>,
}

struct FirstStageCache {
    bbox: MlpCache,
    deltas: Vec<f64>,
    /// Sine embeddings of the selected (detached) proposal boxes.
    query_emb: Vec<f64>,
    query_ln: LayerNormCache,
}

pub struct ModelCache {
    stem: crate::pyramid::StemCache,
    pyr_raw: FeaturePyramid,
    pixel_refs: Vec<f64>,
    token_level: Vec<usize>,
    n_tokens: usize,
    enc: Vec<EncLayerCache>,
    memory: Vec<f64>,
    mem_pyr: Vec<FeatureMap>,
    first_stage: Option<FirstStageCache>,
    refs: Vec<f64>,
    ref_logits: Vec<f64>,
    dec: Vec<DecLayerCache>,
}

/// Per-output upstream gradients for [`Model::backward`]. Entries may be
/// empty when a layer contributes nothing to the loss.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads {
    pub layer_class: Vec<Vec<f64>>,
    pub layer_boxes: Vec<Vec<f64>>,
    pub first_stage_class: Option<Vec<f64>>,
    pub first_stage_boxes: Option<Vec<f64>>,
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn sum2(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Scatter `[T, C]` token gradients into per-level `[C, H, W]` buffers.
fn tokens_to_levels(tokens: &[f64], dims: &[(usize, usize)], c: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = dims.iter().map(|&(h, w)| vec![0.0; c * h * w]).collect();
    let mut t = 0;
    for (l, &(h, w)) in dims.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[l][(ch * h + y) * w + x] += tokens[t * c + ch];
                }
                t += 1;
            }
        }
    }
    out
}

/// Gather per-level `[C, H, W]` buffers back into `[T, C]` token order.
fn levels_to_tokens(levels: &[Vec<f64>], dims: &[(usize, usize)], c: usize, out: &mut [f64]) {
    let mut t = 0;
    for (l, &(h, w)) in dims.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[t * c + ch] += levels[l][(ch * h + y) * w + x];
                }
                t += 1;
            }
        }
    }
}

impl Model {
    /// Full forward pass over one `[3, h, w]` image.
    pub fn forward(
        &self,
        store: &ParamStore,
        image: &[f64],
        h: usize,
        w: usize,
    ) -> Result<(ModelOutput, ModelCache)> {
        let cfg = &self.cfg;
        let c = cfg.channels;
        let n = cfg.n_queries;

        let (pyr_raw, stem_cache) = self.stem.forward(store, image, h, w)?;
        let dims = pyr_raw.level_dims();
        let n_tokens = pyr_raw.token_count();
        let pixel_refs = pyr_raw.pixel_references();
        let token_level: Vec<usize> = dims
            .iter()
            .enumerate()
            .flat_map(|(l, &(lh, lw))| std::iter::repeat_n(l, lh * lw))
            .collect();

        // Positional + scale embeddings as a token array added to queries.
        let positional: Vec<Vec<f64>> = dims
            .iter()
            .map(|&(lh, lw)| sine_positional_embedding(lh, lw, c))
            .collect::<Result<_>>()?;
        let key_pyr = {
            let mut pos_pyr = pyr_raw.clone();
            for (map, _) in pos_pyr.levels.iter_mut().zip(&dims) {
                map.data.fill(0.0);
            }
            attach_embeddings(&pos_pyr, &positional, store, &self.scale_embeds)?
        };
        let posl = key_pyr.flatten();

        // Encoder
        let mut src = pyr_raw.flatten();
        let mut enc_caches = Vec::with_capacity(self.enc.len());
        for layer in &self.enc {
            let q = sum2(&src, &posl);
            let value_pyr = pyr_raw.unflatten(&src).levels;
            let (attn_out, attn_cache) = match &layer.attn {
                AnyAttn::Deform(p) => {
                    let (o, cc) = ms_deform_attn_forward(
                        store,
                        p,
                        &q,
                        Reference::Points(&pixel_refs),
                        &value_pyr,
                        n_tokens,
                    )?;
                    (o, AttnCache::Deform(cc))
                }
                AnyAttn::Dense(p) => {
                    let (o, cc) = dense_attn_forward(store, p, &q, &q, &src, n_tokens, n_tokens)?;
                    (o, AttnCache::Dense(cc))
                }
            };
            let sum1 = sum2(&src, &attn_out);
            let (src_mid, ln1) = layer.norm1.forward(store, &sum1, n_tokens);
            let (ffn_out, ffn) = layer.ffn.forward(store, &src_mid, n_tokens);
            let sum_2 = sum2(&src_mid, &ffn_out);
            let (src_new, ln2) = layer.norm2.forward(store, &sum_2, n_tokens);
            enc_caches.push(EncLayerCache {
                value_pyr,
                attn: attn_cache,
                ln1,
                ffn,
                ln2,
            });
            src = src_new;
        }
        let memory = src;
        let mem_pyr = pyr_raw.unflatten(&memory).levels;

        // Queries and initial references.
        let (qpos, refs, ref_logits, first_stage_cache, first_stage_preds, init_references);
        let mut tgt_init: Option<Vec<f64>> = None;
        match cfg.mode {
            Mode::Plain | Mode::Refine => {
                let (r, logits) = self.reference_points(store);
                qpos = store.get(self.query_embed.unwrap()).to_vec();
                init_references = r.clone();
                refs = r;
                ref_logits = logits;
                first_stage_cache = None;
                first_stage_preds = None;
            }
            Mode::TwoStage => {
                let fs = self.first_stage.as_ref().unwrap();
                let scores = fs.class.forward(store, &memory, n_tokens);
                let (deltas, bbox_cache) = fs.bbox.forward(store, &memory, n_tokens);
                let mut proposals = vec![0.0; n_tokens * 4];
                for t in 0..n_tokens {
                    let b = propose_box(
                        pixel_refs[2 * t],
                        pixel_refs[2 * t + 1],
                        token_level[t] + 1,
                        &deltas[t * 4..t * 4 + 4],
                        DEFAULT_BASE_SCALE,
                    );
                    proposals[t * 4..t * 4 + 4].copy_from_slice(&b.to_array());
                }
                let top = top_k_proposals(&scores, n)?;
                let mut init = vec![0.0; n * 4];
                let mut emb = vec![0.0; n * c];
                for (qi, &t) in top.iter().enumerate() {
                    init[qi * 4..qi * 4 + 4].copy_from_slice(&proposals[t * 4..t * 4 + 4]);
                    let e = sine_box_embedding(
                        [init[qi * 4], init[qi * 4 + 1], init[qi * 4 + 2], init[qi * 4 + 3]],
                        c,
                    );
                    emb[qi * c..(qi + 1) * c].copy_from_slice(&e);
                }
                // Learned projection of the proposal embedding into the
                // concatenated query position and initial query feature.
                let lin = self.query_trans.as_ref().unwrap().forward(store, &emb, n);
                let (qt, query_ln) = self
                    .query_trans_norm
                    .as_ref()
                    .unwrap()
                    .forward(store, &lin, n);
                let mut qp = vec![0.0; n * c];
                let mut t0 = vec![0.0; n * c];
                for qi in 0..n {
                    qp[qi * c..(qi + 1) * c]
                        .copy_from_slice(&qt[qi * 2 * c..qi * 2 * c + c]);
                    t0[qi * c..(qi + 1) * c]
                        .copy_from_slice(&qt[qi * 2 * c + c..(qi + 1) * 2 * c]);
                }
                first_stage_preds = Some(LayerPreds {
                    class_logits: scores,
                    boxes: proposals,
                });
                first_stage_cache = Some(FirstStageCache {
                    bbox: bbox_cache,
                    deltas,
                    query_emb: emb,
                    query_ln,
                });
                init_references = init.clone();
                refs = init; // boxes, detached
                ref_logits = Vec::new();
                qpos = qp;
                tgt_init = Some(t0);
            }
        }

        // Decoder
        let mut tgt = tgt_init.unwrap_or_else(|| vec![0.0; n * c]);
        let mut prev_boxes: Vec<f64> = if cfg.mode == Mode::TwoStage {
            refs.clone()
        } else if cfg.mode == Mode::Refine {
            let mut b = vec![0.0; n * 4];
            for qi in 0..n {
                let ib = initial_box(refs[qi * 2], refs[qi * 2 + 1], cfg.box_size_prior);
                b[qi * 4..qi * 4 + 4].copy_from_slice(&ib.to_array());
            }
            b
        } else {
            Vec::new()
        };
        let mut dec_caches = Vec::with_capacity(self.dec.len());
        let mut layer_preds = Vec::with_capacity(self.dec.len());

        for (d, layer) in self.dec.iter().enumerate() {
            let q_self = sum2(&tgt, &qpos);
            let (self_out, self_cache) =
                dense_attn_forward(store, &layer.self_attn, &q_self, &q_self, &tgt, n, n)?;
            let sum1 = sum2(&tgt, &self_out);
            let (tgt1, ln1) = layer.norm1.forward(store, &sum1, n);

            let z_cross = sum2(&tgt1, &qpos);
            // In refine mode the very first layer's sampling still sees the
            // undetached initial references; afterwards boxes are detached.
            let refs_live = match cfg.mode {
                Mode::Plain => true,
                Mode::Refine => d == 0,
                Mode::TwoStage => false,
            };
            let (cross_out, cross_cache) = match &layer.cross {
                AnyAttn::Deform(p) => {
                    let reference = if cfg.refines() {
                        Reference::Boxes(&prev_boxes)
                    } else {
                        Reference::Points(&refs)
                    };
                    let (o, cc) =
                        ms_deform_attn_forward(store, p, &z_cross, reference, &mem_pyr, n)?;
                    (o, AttnCache::Deform(cc))
                }
                AnyAttn::Dense(p) => {
                    let k = sum2(&memory, &posl);
                    let (o, cc) =
                        dense_attn_forward(store, p, &z_cross, &k, &memory, n, n_tokens)?;
                    (o, AttnCache::Dense(cc))
                }
            };
            let sum_2 = sum2(&tgt1, &cross_out);
            let (tgt2, ln2) = layer.norm2.forward(store, &sum_2, n);
            let (ffn_out, ffn) = layer.ffn.forward(store, &tgt2, n);
            let sum3 = sum2(&tgt2, &ffn_out);
            let (tgt_out, ln3) = layer.norm3.forward(store, &sum3, n);

            let head = self.head_for(d);
            let class_logits = head.class.forward(store, &tgt_out, n);
            let (raw, bbox) = head.bbox.forward(store, &tgt_out, n);
            let mut boxes = vec![0.0; n * 4];
            for qi in 0..n {
                let b = if cfg.refines() {
                    refine_box(
                        BoxN::from_slice(&prev_boxes[qi * 4..qi * 4 + 4]),
                        &raw[qi * 4..qi * 4 + 4],
                    )
                } else {
                    decode_box(refs[qi * 2], refs[qi * 2 + 1], &raw[qi * 4..qi * 4 + 4])
                };
                boxes[qi * 4..qi * 4 + 4].copy_from_slice(&b.to_array());
            }

            dec_caches.push(DecLayerCache {
                self_cache,
                ln1,
                cross: cross_cache,
                refs_live,
                ln2,
                ffn,
                ln3,
                tgt_out: tgt_out.clone(),
                bbox,
                raw,
                prev_boxes: prev_boxes.clone(),
            });
            layer_preds.push(LayerPreds {
                class_logits,
                boxes: boxes.clone(),
            });
            if cfg.refines() {
                prev_boxes = boxes; // used detached by the next layer
            }
            tgt = tgt_out;
        }

        crate::param::assert_finite_slice(&tgt, "decoder output")?;
        Ok((
            ModelOutput {
                layer_preds,
                first_stage: first_stage_preds,
                init_references,
            },
            ModelCache {
                stem: stem_cache,
                pyr_raw,
                pixel_refs,
                token_level,
                n_tokens,
                enc: enc_caches,
                memory,
                mem_pyr,
                first_stage: first_stage_cache,
                refs,
                ref_logits,
                dec: dec_caches,
            },
        ))
    }

    /// Backward over the whole model, accumulating parameter gradients.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &ModelCache,
        grads: &OutputGrads,
        grad: &mut GradBuf,
    ) {
        let cfg = &self.cfg;
        let c = cfg.channels;
        let n = cfg.n_queries;
        let n_tokens = cache.n_tokens;
        let dims = cache.pyr_raw.level_dims();

        let mut g_tgt = vec![0.0; n * c];
        let mut g_qpos = vec![0.0; n * c];
        let mut g_refs = vec![0.0; n * 2];
        let mut g_memory = vec![0.0; n_tokens * c];
        let mut g_posl = vec![0.0; n_tokens * c];

        for d in (0..self.dec.len()).rev() {
            let lc = &cache.dec[d];
            let layer = &self.dec[d];
            let head = self.head_for(d);

            // Heads
            let mut g_tgt_out = std::mem::take(&mut g_tgt);
            if let Some(gc) = grads.layer_class.get(d).filter(|v| !v.is_empty()) {
                let g = head.class.backward(store, &lc.tgt_out, n, gc, grad);
                add_into(&mut g_tgt_out, &g);
            }
            if let Some(gb) = grads.layer_boxes.get(d).filter(|v| !v.is_empty()) {
                let mut g_raw = vec![0.0; n * 4];
                for qi in 0..n {
                    let up = &gb[qi * 4..qi * 4 + 4];
                    let raw = &lc.raw[qi * 4..qi * 4 + 4];
                    if cfg.refines() {
                        let gr = refine_box_grad(
                            BoxN::from_slice(&lc.prev_boxes[qi * 4..qi * 4 + 4]),
                            raw,
                            up,
                        );
                        g_raw[qi * 4..qi * 4 + 4].copy_from_slice(&gr);
                    } else {
                        let (gr, grf) = decode_box_grad(
                            cache.refs[qi * 2],
                            cache.refs[qi * 2 + 1],
                            raw,
                            up,
                        );
                        g_raw[qi * 4..qi * 4 + 4].copy_from_slice(&gr);
                        g_refs[qi * 2] += grf[0];
                        g_refs[qi * 2 + 1] += grf[1];
                    }
                }
                let g = head.bbox.backward(store, &lc.bbox, n, &g_raw, grad);
                add_into(&mut g_tgt_out, &g);
            }

            // FFN block
            let g_sum3 = layer.norm3.backward(store, &lc.ln3, n, &g_tgt_out, grad);
            let mut g_tgt2 = g_sum3.clone();
            let g = layer.ffn.backward(store, &lc.ffn, n, &g_sum3, grad);
            add_into(&mut g_tgt2, &g);

            // Cross-attention block
            let g_sum2 = layer.norm2.backward(store, &lc.ln2, n, &g_tgt2, grad);
            let mut g_tgt1 = g_sum2.clone();
            match (&layer.cross, &lc.cross) {
                (AnyAttn::Deform(p), AttnCache::Deform(cc)) => {
                    let out =
                        ms_deform_attn_backward(store, p, &cache.mem_pyr, cc, &g_sum2, grad);
                    add_into(&mut g_tgt1, &out.z);
                    add_into(&mut g_qpos, &out.z);
                    if lc.refs_live {
                        if cfg.mode == Mode::Plain {
                            add_into(&mut g_refs, &out.refs);
                        } else {
                            // Box references: only the center traces back to
                            // the reference head; the size prior is constant.
                            for qi in 0..n {
                                g_refs[qi * 2] += out.refs[qi * 4];
                                g_refs[qi * 2 + 1] += out.refs[qi * 4 + 1];
                            }
                        }
                    }
                    levels_to_tokens(&out.pyramid, &dims, c, &mut g_memory);
                }
                (AnyAttn::Dense(p), AttnCache::Dense(cc)) => {
                    let (gq, gk, gv) = dense_attn_backward(store, p, cc, &g_sum2, grad);
                    add_into(&mut g_tgt1, &gq);
                    add_into(&mut g_qpos, &gq);
                    add_into(&mut g_memory, &gk);
                    add_into(&mut g_memory, &gv);
                    add_into(&mut g_posl, &gk);
                }
                _ => unreachable!("cache kind always matches layer kind"),
            }

            // Self-attention block
            let g_sum1 = layer.norm1.backward(store, &lc.ln1, n, &g_tgt1, grad);
            let mut g_tgt_in = g_sum1.clone();
            let (gq, gk, gv) =
                dense_attn_backward(store, &layer.self_attn, &lc.self_cache, &g_sum1, grad);
            add_into(&mut g_tgt_in, &gq);
            add_into(&mut g_tgt_in, &gk);
            add_into(&mut g_tgt_in, &gv);
            add_into(&mut g_qpos, &gq);
            add_into(&mut g_qpos, &gk);
            g_tgt = g_tgt_in;
        }
        // In plain/refine modes the decoder input is all zeros, so g_tgt
        // ends here; in two-stage it flows back through the learned query
        // projection below.

        // Reference head and query embeddings.
        if let (Some(qe), Some(rp)) = (self.query_embed, &self.ref_proj) {
            let mut g_logits = vec![0.0; n * 2];
            for i in 0..n * 2 {
                g_logits[i] = g_refs[i] * sigmoid_grad(cache.ref_logits[i]);
            }
            let qpos = store.get(qe).to_vec();
            let g = rp.backward(store, &qpos, n, &g_logits, grad);
            add_into(&mut g_qpos, &g);
            add_into(grad.get_mut(store, qe), &g_qpos);
        }
        // Two-stage: query positions and initial features both come from the
        // learned projection of the detached proposal embeddings, so the
        // chain ends at the projection parameters.
        if let (Some(qt), Some(qn), Some(fsc)) = (
            &self.query_trans,
            &self.query_trans_norm,
            &cache.first_stage,
        ) {
            let mut g_cat = vec![0.0; n * 2 * c];
            for qi in 0..n {
                g_cat[qi * 2 * c..qi * 2 * c + c]
                    .copy_from_slice(&g_qpos[qi * c..(qi + 1) * c]);
                g_cat[qi * 2 * c + c..(qi + 1) * 2 * c]
                    .copy_from_slice(&g_tgt[qi * c..(qi + 1) * c]);
            }
            let g_lin = qn.backward(store, &fsc.query_ln, n, &g_cat, grad);
            // The embedding input is a constant of the detached proposals.
            let _ = qt.backward(store, &fsc.query_emb, n, &g_lin, grad);
        }
        if let (Some(fs), Some(fsc)) = (&self.first_stage, &cache.first_stage) {
            if let Some(gc) = grads.first_stage_class.as_ref().filter(|v| !v.is_empty()) {
                let g = fs.class.backward(store, &cache.memory, n_tokens, gc, grad);
                add_into(&mut g_memory, &g);
            }
            if let Some(gb) = grads.first_stage_boxes.as_ref().filter(|v| !v.is_empty()) {
                let mut g_deltas = vec![0.0; n_tokens * 4];
                for t in 0..n_tokens {
                    let gd = propose_box_grad(
                        cache.pixel_refs[2 * t],
                        cache.pixel_refs[2 * t + 1],
                        cache.token_level[t] + 1,
                        &fsc.deltas[t * 4..t * 4 + 4],
                        DEFAULT_BASE_SCALE,
                        &gb[t * 4..t * 4 + 4],
                    );
                    g_deltas[t * 4..t * 4 + 4].copy_from_slice(&gd);
                }
                let g = fs.bbox.backward(store, &fsc.bbox, n_tokens, &g_deltas, grad);
                add_into(&mut g_memory, &g);
            }
        }

        // Encoder
        let mut g_src = g_memory;
        for (layer, lc) in self.enc.iter().zip(&cache.enc).rev() {
            let g_sum2 = layer.norm2.backward(store, &lc.ln2, n_tokens, &g_src, grad);
            let mut g_mid = g_sum2.clone();
            let g = layer.ffn.backward(store, &lc.ffn, n_tokens, &g_sum2, grad);
            add_into(&mut g_mid, &g);

            let g_sum1 = layer.norm1.backward(store, &lc.ln1, n_tokens, &g_mid, grad);
            let mut g_src_in = g_sum1.clone();
            match (&layer.attn, &lc.attn) {
                (AnyAttn::Deform(p), AttnCache::Deform(cc)) => {
                    let out = ms_deform_attn_backward(store, p, &lc.value_pyr, cc, &g_sum1, grad);
                    add_into(&mut g_src_in, &out.z);
                    add_into(&mut g_posl, &out.z);
                    // Pixel references are fixed geometry: drop out.refs.
                    levels_to_tokens(&out.pyramid, &dims, c, &mut g_src_in);
                }
                (AnyAttn::Dense(p), AttnCache::Dense(cc)) => {
                    let (gq, gk, gv) = dense_attn_backward(store, p, cc, &g_sum1, grad);
                    add_into(&mut g_src_in, &gq);
                    add_into(&mut g_src_in, &gk);
                    add_into(&mut g_src_in, &gv);
                    add_into(&mut g_posl, &gq);
                    add_into(&mut g_posl, &gk);
                }
                _ => unreachable!(),
            }
            g_src = g_src_in;
        }

        // Scale embeddings: the only learnable part of the key offsets.
        {
            let ge = grad.get_mut(store, self.scale_embeds.id);
            for (t, &l) in cache.token_level.iter().enumerate() {
                for ch in 0..c {
                    ge[l * c + ch] += g_posl[t * c + ch];
                }
            }
        }

        // Stem
        let level_grads = tokens_to_levels(&g_src, &dims, c);
        self.stem.backward(store, &cache.stem, &level_grads, grad);
    }
}

/// Final detections from the last decoder layer: per-(query, class) scores
/// with the query's box, the `top_k` best kept.
pub fn extract_detections(
    preds: &LayerPreds,
    n_queries: usize,
    n_classes: usize,
    image_id: usize,
    top_k: usize,
) -> Vec<crate::eval::Record> {
    let mut scored: Vec<(f64, usize, usize)> = Vec::with_capacity(n_queries * n_classes);
    for q in 0..n_queries {
        for cl in 0..n_classes {
            scored.push((sigmoid(preds.class_logits[q * n_classes + cl]), q, cl));
        }
    }
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    scored
        .into_iter()
        .take(top_k)
        .map(|(score, q, class)| crate::eval::Record {
            image_id,
            class,
            cx: preds.boxes[q * 4],
            cy: preds.boxes[q * 4 + 1],
            w: preds.boxes[q * 4 + 2],
            h: preds.boxes[q * 4 + 3],
            score: Some(score),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    pub fn tiny_config(mode: Mode, attn: AttnKind) -> ModelConfig {
        ModelConfig {
            channels: 16,
            heads: 2,
            points: 2,
            levels: 2,
            enc_layers: 1,
            dec_layers: 2,
            n_queries: 4,
            n_classes: 3,
            ffn_dim: 32,
            mode,
            attn,
            ..Default::default()
        }
    }

    fn build(mode: Mode, attn: AttnKind) -> (ParamStore, Model) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = Model::new(&mut store, &mut rng, &tiny_config(mode, attn)).unwrap();
        (store, model)
    }

    fn test_image(h: usize, w: usize) -> Vec<f64> {
        (0..3 * h * w)
            .map(|i| ((i as f64 * 0.37).sin() + 1.0) * 0.5)
            .collect()
    }

    #[test]
    fn forward_shapes_all_modes() {
        for mode in [Mode::Plain, Mode::Refine, Mode::TwoStage] {
            let (store, model) = build(mode, AttnKind::Deformable);
            let (out, _) = model.forward(&store, &test_image(32, 32), 32, 32).unwrap();
            assert_eq!(out.layer_preds.len(), 2);
            for lp in &out.layer_preds {
                assert_eq!(lp.class_logits.len(), 4 * 3);
                assert_eq!(lp.boxes.len(), 4 * 4);
                for &b in &lp.boxes {
                    assert!((0.0..=1.0).contains(&b), "box coord {b}");
                }
            }
            match mode {
                Mode::TwoStage => {
                    let fs = out.first_stage.as_ref().unwrap();
                    // 32x32 image, strides 16 and 32 -> 4 + 1 tokens.
                    assert_eq!(fs.class_logits.len(), 5);
                    assert_eq!(fs.boxes.len(), 5 * 4);
                    assert_eq!(out.init_references.len(), 4 * 4);
                }
                _ => assert_eq!(out.init_references.len(), 4 * 2),
            }
        }
    }

    #[test]
    fn plain_mode_layers_share_references() {
        let (store, model) = build(Mode::Plain, AttnKind::Deformable);
        let (out, cache) = model.forward(&store, &test_image(32, 32), 32, 32).unwrap();
        assert_eq!(cache.refs, out.init_references);
        // Heads are shared: same raw deltas would give same boxes, but the
        // token content differs per layer; just check the reference link:
        // decoding zero deltas from layer raw equals the stored boxes.
        for (d, lp) in out.layer_preds.iter().enumerate() {
            for qi in 0..4 {
                let b = decode_box(
                    cache.refs[qi * 2],
                    cache.refs[qi * 2 + 1],
                    &cache.dec[d].raw[qi * 4..qi * 4 + 4],
                );
                for (x, y) in b.to_array().iter().zip(&lp.boxes[qi * 4..qi * 4 + 4]) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn refine_mode_chains_boxes() {
        let (store, model) = build(Mode::Refine, AttnKind::Deformable);
        let (out, cache) = model.forward(&store, &test_image(32, 32), 32, 32).unwrap();
        // Layer 1's previous boxes are exactly layer 0's outputs.
        assert_eq!(cache.dec[1].prev_boxes, out.layer_preds[0].boxes);
        // Layer 0 refines the initial 0.1-sized boxes at the references.
        for qi in 0..4 {
            assert_eq!(cache.dec[0].prev_boxes[qi * 4 + 2], 0.1);
            assert!((cache.dec[0].prev_boxes[qi * 4] - out.init_references[qi * 2]).abs() < 1e-12);
        }
    }

    #[test]
    fn two_stage_proposals_seed_decoder() {
        let (store, model) = build(Mode::TwoStage, AttnKind::Deformable);
        let (out, cache) = model.forward(&store, &test_image(32, 32), 32, 32).unwrap();
        let fs = out.first_stage.as_ref().unwrap();
        // Initial decoder boxes are the top-scoring proposals.
        let top = top_k_proposals(&fs.class_logits, 4).unwrap();
        for (qi, &t) in top.iter().enumerate() {
            for i in 0..4 {
                assert_eq!(out.init_references[qi * 4 + i], fs.boxes[t * 4 + i]);
            }
        }
        assert_eq!(cache.dec[0].prev_boxes, out.init_references);
    }

    #[test]
    fn two_stage_query_projection_grads_match_fd() {
        let (store, model) = build(Mode::TwoStage, AttnKind::Deformable);
        let image = test_image(32, 32);
        // Only layer 0 is weighted: its box path runs from the constant
        // proposals, so finite differences do not cross the deliberately
        // detached between-layer box chain.
        let objective = |s: &ParamStore| -> f64 {
            let (out, _) = model.forward(s, &image, 32, 32).unwrap();
            let lp = &out.layer_preds[0];
            lp.class_logits
                .iter()
                .chain(&lp.boxes)
                .enumerate()
                .map(|(i, v)| v * (0.01 + 0.01 * (i % 7) as f64))
                .sum()
        };
        let (out, cache) = model.forward(&store, &image, 32, 32).unwrap();
        let mut grads = OutputGrads::default();
        for (d, lp) in out.layer_preds.iter().enumerate() {
            let n_cls = lp.class_logits.len();
            let w = |i: usize| {
                if d == 0 {
                    0.01 + 0.01 * (i % 7) as f64
                } else {
                    0.0
                }
            };
            grads.layer_class.push((0..n_cls).map(w).collect());
            grads
                .layer_boxes
                .push((0..lp.boxes.len()).map(|i| w(n_cls + i)).collect());
        }
        let mut gb = GradBuf::zeros(&store);
        model.backward(&store, &cache, &grads, &mut gb);
        for name in [
            "query_trans.weight",
            "query_trans.bias",
            "query_trans_norm.gamma",
            "query_trans_norm.beta",
        ] {
            let id = store.find(name).unwrap();
            let e = store.entry(id);
            let (off, len) = (e.offset, e.len);
            let x = store.data[off..off + len].to_vec();
            let analytic = gb.0[off..off + len].to_vec();
            let report = crate::kernels::finite_diff_check(
                |xs| {
                    let mut s2 = store.clone();
                    s2.data[off..off + len].copy_from_slice(xs);
                    objective(&s2)
                },
                &x,
                &analytic,
                1e-5,
            )
            .unwrap();
            // Absolute tolerance: some coordinates have near-zero gradient,
            // where the relative measure is dominated by FD truncation noise.
            assert!(report.max_abs_err < 1e-7, "{name}: {report:?}");
        }
    }

    #[test]
    fn dense_ablation_runs() {
        let (store, model) = build(Mode::Plain, AttnKind::Dense);
        let (out, _) = model.forward(&store, &test_image(32, 32), 32, 32).unwrap();
        assert_eq!(out.layer_preds.len(), 2);
        assert!(out
            .layer_preds
            .iter()
            .all(|lp| lp.class_logits.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn backward_runs_and_touches_most_params() {
        for mode in [Mode::Plain, Mode::Refine, Mode::TwoStage] {
            let (store, model) = build(mode, AttnKind::Deformable);
            let (out, cache) = model.forward(&store, &test_image(32, 32), 32, 32).unwrap();
            let mut grads = OutputGrads::default();
            for lp in &out.layer_preds {
                grads
                    .layer_class
                    .push(lp.class_logits.iter().map(|_| 0.1).collect());
                grads.layer_boxes.push(lp.boxes.iter().map(|_| 0.1).collect());
            }
            if let Some(fs) = &out.first_stage {
                grads.first_stage_class = Some(vec![0.1; fs.class_logits.len()]);
                grads.first_stage_boxes = Some(vec![0.1; fs.boxes.len()]);
            }
            let mut gb = GradBuf::zeros(&store);
            model.backward(&store, &cache, &grads, &mut gb);
            assert!(gb.0.iter().all(|g| g.is_finite()));
            // Count parameter entries that received nonzero gradient; the
            // bulk of the model must be live. (Zero-initialized projections
            // legitimately pass zero gradient to their own inputs but still
            // receive weight gradients.)
            let live = store
                .entries()
                .iter()
                .filter(|e| {
                    gb.0[e.offset..e.offset + e.len]
                        .iter()
                        .any(|&g| g != 0.0)
                })
                .count();
            let total = store.entries().len();
            assert!(
                live * 10 >= total * 8,
                "{mode:?}: only {live}/{total} parameter tensors received gradient"
            );
        }
    }

    #[test]
    fn deterministic_construction_and_forward() {
        let (store_a, model_a) = build(Mode::Refine, AttnKind::Deformable);
        let (store_b, model_b) = build(Mode::Refine, AttnKind::Deformable);
        assert_eq!(store_a.len(), store_b.len());
        let img = test_image(32, 32);
        let (oa, _) = model_a.forward(&store_a, &img, 32, 32).unwrap();
        let (ob, _) = model_b.forward(&store_b, &img, 32, 32).unwrap();
        for (a, b) in oa.layer_preds.iter().zip(&ob.layer_preds) {
            assert_eq!(a.class_logits, b.class_logits);
            assert_eq!(a.boxes, b.boxes);
        }
    }
}
