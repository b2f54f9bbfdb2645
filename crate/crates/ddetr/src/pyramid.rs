//! Multi-scale feature pyramid: a tiny strided-conv stem (standing in for a
//! pretrained backbone), per-stage 1x1 projections, the stride-2 extra
//! level, sine positional embeddings, and learnable scale-level embeddings.

use crate::kernels::{FeatureMap, Point2};
use crate::nn::{relu, relu_backward, Conv2d};
use crate::param::{GradBuf, Init, ParamId, ParamStore};
use crate::{DdError, Result};
use rand_chacha::ChaCha8Rng;

/// `L` feature maps, all `C` channels, halving resolution per level.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureMap>,
    /// Downsampling factor of each level relative to the input image.
    pub strides: Vec<usize>,
}

impl FeaturePyramid {
    pub fn token_count(&self) -> usize {
        self.levels.iter().map(|f| f.height * f.width).sum()
    }

    pub fn level_dims(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|f| (f.height, f.width)).collect()
    }

    /// Flatten to `[sum H_l W_l, C]` tokens, level-major then row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let c = self.levels[0].channels;
        let mut out = Vec::with_capacity(self.token_count() * c);
        for map in &self.levels {
            for y in 0..map.height {
                for x in 0..map.width {
                    for ch in 0..c {
                        out.push(map.at(ch, y, x));
                    }
                }
            }
        }
        out
    }

    /// Inverse of [`flatten`] given matching level shapes.
    pub fn unflatten(&self, tokens: &[f64]) -> FeaturePyramid {
        let c = self.levels[0].channels;
        let mut idx = 0;
        let levels = self
            .levels
            .iter()
            .map(|template| {
                let mut map =
                    FeatureMap::zeros(c, template.height, template.width, template.level_id);
                for y in 0..template.height {
                    for x in 0..template.width {
                        for ch in 0..c {
                            *map.at_mut(ch, y, x) = tokens[idx * c + ch];
                        }
                        idx += 1;
                    }
                }
                map
            })
            .collect();
        FeaturePyramid {
            levels,
            strides: self.strides.clone(),
        }
    }

    /// Normalized center coordinates of every pixel, in flatten order.
    pub fn pixel_references(&self) -> Vec<f64> {
        let mut refs = Vec::with_capacity(self.token_count() * 2);
        for map in &self.levels {
            let sx = (map.width.max(2) - 1) as f64;
            let sy = (map.height.max(2) - 1) as f64;
            for y in 0..map.height {
                for x in 0..map.width {
                    refs.push(x as f64 / sx);
                    refs.push(y as f64 / sy);
                }
            }
        }
        refs
    }
}

/// Strided conv stem with three stages (strides 8, 16, 32) plus the
/// stride-2 extra level; all stages projected to `C` channels. The stem
/// always runs to full depth: a pyramid with fewer levels exposes only the
/// deepest stages, the way single-scale detectors read just the last
/// backbone stage.
#[derive(Debug, Clone)]
pub struct Stem {
    pub convs: Vec<Conv2d>,
    pub projs: Vec<Conv2d>,
    pub extra: Option<Conv2d>,
    pub channels: usize,
    pub levels: usize,
}

pub struct StemCache {
    /// Input of each stem conv.
    conv_inputs: Vec<Vec<f64>>,
    /// Pre-ReLU output of each stem conv.
    conv_pre: Vec<Vec<f64>>,
    /// `(h, w)` of each conv input.
    in_sizes: Vec<(usize, usize)>,
    /// `(h, w)` of each conv output.
    out_sizes: Vec<(usize, usize)>,
    /// Which conv index produced each pyramid stage.
    stage_conv: Vec<usize>,
}

impl Stem {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        levels: usize,
    ) -> Result<Self> {
        if levels == 0 || levels > 4 {
            return Err(DdError::Config(format!(
                "pyramid supports 1..=4 levels, got {levels}"
            )));
        }
        let n_stages = levels.min(3);
        let n_convs = 5; // three convs reach stride 8, two more finish the 8/16/32 stages
        let mut convs = Vec::with_capacity(n_convs);
        for i in 0..n_convs {
            let in_ch = if i == 0 { 3 } else { channels };
            convs.push(Conv2d::new(
                store,
                rng,
                &format!("{name}.conv{i}"),
                in_ch,
                channels,
                3,
                2,
                1,
            ));
        }
        let projs = (0..n_stages)
            .map(|i| {
                Conv2d::new(
                    store,
                    rng,
                    &format!("{name}.proj{i}"),
                    channels,
                    channels,
                    1,
                    1,
                    0,
                )
            })
            .collect();
        let extra = (levels == 4).then(|| {
            Conv2d::new(store, rng, &format!("{name}.extra"), channels, channels, 3, 2, 1)
        });
        Ok(Self {
            convs,
            projs,
            extra,
            channels,
            levels,
        })
    }

    /// Total stride of the deepest level.
    pub fn max_stride(&self) -> usize {
        let mut s = 1usize << self.convs.len();
        if self.extra.is_some() {
            s *= 2;
        }
        s
    }

    /// Build the `L`-level pyramid from a `[3, H, W]` image.
    pub fn forward(
        &self,
        store: &ParamStore,
        image: &[f64],
        h: usize,
        w: usize,
    ) -> Result<(FeaturePyramid, StemCache)> {
        if image.len() != 3 * h * w {
            return Err(DdError::ShapeMismatch(format!(
                "image len {} vs 3x{h}x{w}",
                image.len()
            )));
        }
        let stride = self.max_stride();
        if !h.is_multiple_of(stride) || !w.is_multiple_of(stride) {
            return Err(DdError::Config(format!(
                "image {h}x{w} not divisible by total stride {stride}"
            )));
        }
        let mut cache = StemCache {
            conv_inputs: Vec::new(),
            conv_pre: Vec::new(),
            in_sizes: Vec::new(),
            out_sizes: Vec::new(),
            stage_conv: Vec::new(),
        };
        let mut x = image.to_vec();
        let (mut ch, mut cw) = (h, w);
        let mut stages: Vec<(Vec<f64>, usize, usize)> = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            cache.conv_inputs.push(x.clone());
            cache.in_sizes.push((ch, cw));
            let pre = conv.forward(store, &x, ch, cw);
            let (oh, ow) = conv.out_size(ch, cw);
            cache.conv_pre.push(pre.clone());
            cache.out_sizes.push((oh, ow));
            x = relu(&pre);
            (ch, cw) = (oh, ow);
            // Keep the deepest `n_stages` of the three stride-8/16/32 stages.
            if i + self.projs.len() >= self.convs.len() {
                cache.stage_conv.push(i);
                stages.push((x.clone(), ch, cw));
            }
        }
        let mut levels = Vec::new();
        let mut strides = Vec::new();
        for (li, ((stage, sh, sw), proj)) in stages.iter().zip(&self.projs).enumerate() {
            let projected = proj.forward(store, stage, *sh, *sw);
            levels.push(FeatureMap::from_vec(projected, self.channels, *sh, *sw, li));
            strides.push(h / sh);
        }
        if let Some(extra) = &self.extra {
            let (stage, sh, sw) = stages.last().unwrap();
            let out = extra.forward(store, stage, *sh, *sw);
            let (oh, ow) = extra.out_size(*sh, *sw);
            levels.push(FeatureMap::from_vec(out, self.channels, oh, ow, levels.len()));
            strides.push(h / oh);
        }
        Ok((FeaturePyramid { levels, strides }, cache))
    }

    /// Backward from per-level gradients to the image (image grad is
    /// discarded; parameter gradients are accumulated).
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &StemCache,
        grad_levels: &[Vec<f64>],
        grad: &mut GradBuf,
    ) {
        // Stage gradients from projections / extra level.
        let n_stages = self.projs.len();
        let mut stage_grads: Vec<Vec<f64>> = Vec::with_capacity(n_stages);
        for (li, proj) in self.projs.iter().enumerate() {
            let conv_idx = cache.stage_conv[li];
            let (sh, sw) = cache.out_sizes[conv_idx];
            let stage = relu(&cache.conv_pre[conv_idx]);
            stage_grads.push(proj.backward(store, &stage, sh, sw, &grad_levels[li], grad));
        }
        if let Some(extra) = &self.extra {
            let conv_idx = *cache.stage_conv.last().unwrap();
            let (sh, sw) = cache.out_sizes[conv_idx];
            let stage = relu(&cache.conv_pre[conv_idx]);
            let g = extra.backward(store, &stage, sh, sw, &grad_levels[n_stages], grad);
            let last = stage_grads.last_mut().unwrap();
            for (a, b) in last.iter_mut().zip(&g) {
                *a += b;
            }
        }
        // Walk the conv chain backwards, merging stage gradients where the
        // activation also fed a projection.
        let mut g: Vec<f64> = Vec::new();
        for i in (0..self.convs.len()).rev() {
            if let Some(stage_pos) = cache.stage_conv.iter().position(|&ci| ci == i) {
                let sg = &stage_grads[stage_pos];
                if g.is_empty() {
                    g = sg.clone();
                } else {
                    for (a, b) in g.iter_mut().zip(sg) {
                        *a += b;
                    }
                }
            }
            let g_pre = relu_backward(&cache.conv_pre[i], &g);
            let (ih, iw) = cache.in_sizes[i];
            g = self.convs[i].backward(store, &cache.conv_inputs[i], ih, iw, &g_pre, grad);
        }
    }
}

/// Deterministic sine-cosine positional embedding, `[C, H, W]`.
///
/// Half the channels encode x, half y; within each half, channel pairs
/// `(sin, cos)` at geometrically spaced frequencies (temperature 10000),
/// over coordinates normalized to `[0, 2pi)`.
pub fn sine_positional_embedding(h: usize, w: usize, c: usize) -> Result<Vec<f64>> {
    if !c.is_multiple_of(2) {
        return Err(DdError::Config(format!(
            "positional embedding needs even channels, got {c}"
        )));
    }
    let half = c / 2;
    let mut out = vec![0.0; c * h * w];
    let two_pi = 2.0 * std::f64::consts::PI;
    let embed = |pos: f64, n: usize, dims: usize| -> Vec<f64> {
        let u = pos / n as f64 * two_pi;
        (0..dims)
            .map(|d| {
                let pair = d / 2;
                let freq = 10000f64.powf(-(2.0 * pair as f64) / dims as f64);
                let angle = u * freq;
                if d % 2 == 0 {
                    angle.sin()
                } else {
                    angle.cos()
                }
            })
            .collect()
    };
    for y in 0..h {
        let ey = embed(y as f64, h, half);
        for x in 0..w {
            let ex = embed(x as f64, w, half);
            for d in 0..half {
                out[(d * h + y) * w + x] = ex[d];
                out[((half + d) * h + y) * w + x] = ey[d];
            }
        }
    }
    Ok(out)
}

/// Sine embedding of a single normalized point (used for proposal-derived
/// query positions in the two-stage pipeline).
pub fn sine_point_embedding(x: f64, y: f64, c: usize) -> Vec<f64> {
    let half = c / 2;
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut out = vec![0.0; c];
    for (slot, pos) in [(0, x), (half, y)] {
        let u = pos * two_pi;
        for d in 0..half {
            let pair = d / 2;
            let freq = 10000f64.powf(-(2.0 * pair as f64) / half as f64);
            let angle = u * freq;
            out[slot + d] = if d % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// Sine embedding of a full normalized box `(cx, cy, w, h)`: a quarter of
/// the channels per coordinate, so proposal-derived queries carry their
/// size as well as their position.
pub fn sine_box_embedding(b: [f64; 4], c: usize) -> Vec<f64> {
    let quarter = c / 4;
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut out = vec![0.0; c];
    for (ci, pos) in b.into_iter().enumerate() {
        let u = pos * two_pi;
        for d in 0..quarter {
            let pair = d / 2;
            let freq = 10000f64.powf(-(2.0 * pair as f64) / quarter as f64);
            let angle = u * freq;
            out[ci * quarter + d] = if d % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// Learnable per-level embedding vectors `e_l`.
#[derive(Debug, Clone, Copy)]
pub struct ScaleEmbeds {
    pub id: ParamId,
    pub levels: usize,
    pub channels: usize,
}

impl ScaleEmbeds {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        levels: usize,
        channels: usize,
    ) -> Self {
        let id = store.alloc(
            format!("{name}.scale_embed"),
            &[levels, channels],
            Init::Normal(0.02),
            rng,
        );
        Self {
            id,
            levels,
            channels,
        }
    }
}

/// Key features `z = x + pos + e_l`, leaving the raw `x` untouched for the
/// value pathway.
pub fn attach_embeddings(
    pyramid: &FeaturePyramid,
    positional: &[Vec<f64>],
    store: &ParamStore,
    embeds: &ScaleEmbeds,
) -> Result<FeaturePyramid> {
    if positional.len() != pyramid.levels.len() {
        return Err(DdError::ShapeMismatch(
            "positional embedding count != level count".into(),
        ));
    }
    let e = store.get(embeds.id);
    let c = embeds.channels;
    let levels = pyramid
        .levels
        .iter()
        .zip(positional)
        .map(|(map, pos)| {
            let mut out = map.clone();
            let el = &e[map.level_id * c..(map.level_id + 1) * c];
            for ch in 0..c {
                for y in 0..map.height {
                    for x in 0..map.width {
                        *out.at_mut(ch, y, x) += pos[(ch * map.height + y) * map.width + x] + el[ch];
                    }
                }
            }
            out
        })
        .collect();
    Ok(FeaturePyramid {
        levels,
        strides: pyramid.strides.clone(),
    })
}

/// `phi_l`: rescale a normalized reference onto level-`l` pixel coordinates.
/// `(0,0)` maps to the top-left pixel, `(1,1)` to the bottom-right.
pub fn rescale_reference(p: Point2, h_l: usize, w_l: usize) -> Result<Point2> {
    if !(0.0..=1.0).contains(&p.x) || !(0.0..=1.0).contains(&p.y) {
        return Err(DdError::Config(format!(
            "reference ({}, {}) outside [0,1]^2",
            p.x, p.y
        )));
    }
    Ok(Point2::new(
        p.x * (w_l - 1) as f64,
        p.y * (h_l - 1) as f64,
    ))
}
