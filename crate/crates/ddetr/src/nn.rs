//! Small neural-net building blocks with explicit forward caches and
//! hand-written backward passes: linear, layer norm, ReLU, MLP, conv2d.
//!
//! Token matrices are `[N, C]` row-major slices; images/feature maps are
//! `[C, H, W]`. Backward functions accumulate parameter gradients into a
//! [`GradBuf`] and return the input gradient.

use crate::macs;
use crate::param::{GradBuf, Init, ParamId, ParamStore};
use rand_chacha::ChaCha8Rng;

/// Fully connected layer, weight `[out, in]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        Self::with_lr(store, rng, name, in_dim, out_dim, bias, 1.0)
    }

    pub fn with_lr(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        lr_mult: f64,
    ) -> Self {
        let weight = store.alloc_with_lr(
            format!("{name}.weight"),
            &[out_dim, in_dim],
            Init::Xavier {
                fan_in: in_dim,
                fan_out: out_dim,
            },
            rng,
            lr_mult,
        );
        let bias = bias.then(|| {
            store.alloc_with_lr(format!("{name}.bias"), &[out_dim], Init::Zeros, rng, lr_mult)
        });
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x`: `[n, in]` -> `[n, out]`.
    pub fn forward(&self, store: &ParamStore, x: &[f64], n: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), n * self.in_dim);
        let w = store.get(self.weight);
        let b = self.bias.map(|id| store.get(id));
        let mut out = vec![0.0; n * self.out_dim];
        for i in 0..n {
            let xi = &x[i * self.in_dim..(i + 1) * self.in_dim];
            let oi = &mut out[i * self.out_dim..(i + 1) * self.out_dim];
            for (o, oi_v) in oi.iter_mut().enumerate() {
                let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
                let mut acc = b.map_or(0.0, |b| b[o]);
                for (wv, xv) in row.iter().zip(xi) {
                    acc += wv * xv;
                }
                *oi_v = acc;
            }
        }
        macs::add((n * self.out_dim * self.in_dim) as u64);
        out
    }

    /// Backward: returns grad w.r.t. `x` and accumulates weight/bias grads.
    pub fn backward(
        &self,
        store: &ParamStore,
        x: &[f64],
        n: usize,
        grad_out: &[f64],
        grad: &mut GradBuf,
    ) -> Vec<f64> {
        debug_assert_eq!(grad_out.len(), n * self.out_dim);
        let w = store.get(self.weight).to_vec();
        let mut grad_in = vec![0.0; n * self.in_dim];
        {
            let gw = grad.get_mut(store, self.weight);
            for i in 0..n {
                let xi = &x[i * self.in_dim..(i + 1) * self.in_dim];
                let go = &grad_out[i * self.out_dim..(i + 1) * self.out_dim];
                let gi = &mut grad_in[i * self.in_dim..(i + 1) * self.in_dim];
                for (o, &g) in go.iter().enumerate() {
                    let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
                    let grow = &mut gw[o * self.in_dim..(o + 1) * self.in_dim];
                    for k in 0..self.in_dim {
                        grow[k] += g * xi[k];
                        gi[k] += g * row[k];
                    }
                }
            }
        }
        if let Some(bid) = self.bias {
            let gb = grad.get_mut(store, bid);
            for i in 0..n {
                let go = &grad_out[i * self.out_dim..(i + 1) * self.out_dim];
                for (o, &g) in go.iter().enumerate() {
                    gb[o] += g;
                }
            }
        }
        macs::add((2 * n * self.out_dim * self.in_dim) as u64);
        grad_in
    }
}

/// Layer normalization over the channel axis with learnable gain/bias.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

pub struct LayerNormCache {
    /// Normalized activations `xhat`, `[n, dim]`.
    pub xhat: Vec<f64>,
    /// Reciprocal std per token.
    pub rstd: Vec<f64>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Self {
        let gamma = store.alloc(format!("{name}.gamma"), &[dim], Init::Constant(1.0), rng);
        let beta = store.alloc(format!("{name}.beta"), &[dim], Init::Zeros, rng);
        Self { gamma, beta, dim }
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64], n: usize) -> (Vec<f64>, LayerNormCache) {
        let d = self.dim;
        debug_assert_eq!(x.len(), n * d);
        let gamma = store.get(self.gamma);
        let beta = store.get(self.beta);
        let mut out = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        for i in 0..n {
            let xi = &x[i * d..(i + 1) * d];
            let mean = xi.iter().sum::<f64>() / d as f64;
            let var = xi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for c in 0..d {
                let h = (xi[c] - mean) * r;
                xhat[i * d + c] = h;
                out[i * d + c] = gamma[c] * h + beta[c];
            }
        }
        macs::add((3 * n * d) as u64);
        (out, LayerNormCache { xhat, rstd })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &LayerNormCache,
        n: usize,
        grad_out: &[f64],
        grad: &mut GradBuf,
    ) -> Vec<f64> {
        let d = self.dim;
        let gamma = store.get(self.gamma).to_vec();
        let mut grad_in = vec![0.0; n * d];
        {
            let entries_gamma = grad.get_mut(store, self.gamma);
            for i in 0..n {
                for c in 0..d {
                    entries_gamma[c] += grad_out[i * d + c] * cache.xhat[i * d + c];
                }
            }
        }
        {
            let gb = grad.get_mut(store, self.beta);
            for i in 0..n {
                for c in 0..d {
                    gb[c] += grad_out[i * d + c];
                }
            }
        }
        for i in 0..n {
            let go = &grad_out[i * d..(i + 1) * d];
            let xh = &cache.xhat[i * d..(i + 1) * d];
            // dL/dxhat = go * gamma
            let mut mean_g = 0.0;
            let mut mean_gx = 0.0;
            for c in 0..d {
                let g = go[c] * gamma[c];
                mean_g += g;
                mean_gx += g * xh[c];
            }
            mean_g /= d as f64;
            mean_gx /= d as f64;
            let r = cache.rstd[i];
            for c in 0..d {
                let g = go[c] * gamma[c];
                grad_in[i * d + c] = r * (g - mean_g - xh[c] * mean_gx);
            }
        }
        macs::add((6 * n * d) as u64);
        grad_in
    }
}

/// Elementwise ReLU; forward returns the activation, backward masks.
pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn relu_backward(x: &[f64], grad_out: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(grad_out)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect()
}

/// Multi-layer perceptron with ReLU between layers (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

pub struct MlpCache {
    /// Pre-activation input to each layer (first entry is the MLP input).
    pub inputs: Vec<Vec<f64>>,
    /// Pre-ReLU outputs of all but the last layer.
    pub pre_act: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dims: &[usize],
    ) -> Self {
        assert!(dims.len() >= 2);
        let layers = (0..dims.len() - 1)
            .map(|i| {
                Linear::new(
                    store,
                    rng,
                    &format!("{name}.{i}"),
                    dims[i],
                    dims[i + 1],
                    true,
                )
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64], n: usize) -> (Vec<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_act = Vec::new();
        let mut cur = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(cur.clone());
            let y = layer.forward(store, &cur, n);
            if i + 1 < self.layers.len() {
                pre_act.push(y.clone());
                cur = relu(&y);
            } else {
                cur = y;
            }
        }
        (cur, MlpCache { inputs, pre_act })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &MlpCache,
        n: usize,
        grad_out: &[f64],
        grad: &mut GradBuf,
    ) -> Vec<f64> {
        let mut g = grad_out.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if i + 1 < self.layers.len() {
                g = relu_backward(&cache.pre_act[i], &g);
            }
            g = layer.backward(store, &cache.inputs[i], n, &g, grad);
        }
        g
    }
}

/// 2-d convolution over `[Cin, H, W]` maps; square kernel, zero padding.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * ksize * ksize;
        let weight = store.alloc(
            format!("{name}.weight"),
            &[out_ch, in_ch, ksize, ksize],
            Init::Xavier {
                fan_in,
                fan_out: out_ch * ksize * ksize,
            },
            rng,
        );
        let bias = store.alloc(format!("{name}.bias"), &[out_ch], Init::Zeros, rng);
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            ksize,
            stride,
            pad,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.ksize) / self.stride + 1,
            (w + 2 * self.pad - self.ksize) / self.stride + 1,
        )
    }

    /// `x`: `[Cin, H, W]` -> `[Cout, Ho, Wo]`.
    pub fn forward(&self, store: &ParamStore, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_ch * h * w);
        let (ho, wo) = self.out_size(h, w);
        let weight = store.get(self.weight);
        let bias = store.get(self.bias);
        let k = self.ksize;
        let mut out = vec![0.0; self.out_ch * ho * wo];
        for oc in 0..self.out_ch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[oc];
                    for ic in 0..self.in_ch {
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as i64 - self.pad as i64;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx) as i64 - self.pad as i64;
                                if ix < 0 || ix >= w as i64 {
                                    continue;
                                }
                                acc += weight[((oc * self.in_ch + ic) * k + ky) * k + kx]
                                    * x[(ic * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
        macs::add((self.out_ch * ho * wo * self.in_ch * k * k) as u64);
        out
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: &[f64],
        h: usize,
        w: usize,
        grad_out: &[f64],
        grad: &mut GradBuf,
    ) -> Vec<f64> {
        let (ho, wo) = self.out_size(h, w);
        debug_assert_eq!(grad_out.len(), self.out_ch * ho * wo);
        let weight = store.get(self.weight).to_vec();
        let k = self.ksize;
        let mut grad_in = vec![0.0; self.in_ch * h * w];
        {
            let gw = grad.get_mut(store, self.weight);
            for oc in 0..self.out_ch {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g = grad_out[(oc * ho + oy) * wo + ox];
                        if g == 0.0 {
                            continue;
                        }
                        for ic in 0..self.in_ch {
                            for ky in 0..k {
                                let iy = (oy * self.stride + ky) as i64 - self.pad as i64;
                                if iy < 0 || iy >= h as i64 {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * self.stride + kx) as i64 - self.pad as i64;
                                    if ix < 0 || ix >= w as i64 {
                                        continue;
                                    }
                                    let widx = ((oc * self.in_ch + ic) * k + ky) * k + kx;
                                    let xidx = (ic * h + iy as usize) * w + ix as usize;
                                    gw[widx] += g * x[xidx];
                                    grad_in[xidx] += g * weight[widx];
                                }
                            }
                        }
                    }
                }
            }
        }
        {
            let gb = grad.get_mut(store, self.bias);
            for oc in 0..self.out_ch {
                for oy in 0..ho {
                    for ox in 0..wo {
                        gb[oc] += grad_out[(oc * ho + oy) * wo + ox];
                    }
                }
            }
        }
        macs::add((2 * self.out_ch * ho * wo * self.in_ch * k * k) as u64);
        grad_in
    }
}
