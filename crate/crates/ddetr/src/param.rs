//! Flat parameter storage.
//!
//! All learnable arrays live in one contiguous `Vec<f64>` with a registry of
//! named entries. This makes the optimizer, checkpoint I/O, per-entry
//! learning-rate multipliers, and finite-difference sweeps over "every
//! learnable tensor" trivial: they all walk the same flat buffer.
//!
//! Gradients are accumulated into caller-owned [`GradBuf`]s (same length as
//! the data buffer), so per-image backward passes can run in parallel and be
//! reduced in a fixed order for determinism.

use crate::kernels::sigmoid;
use crate::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

/// Handle to one named parameter array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    /// Per-entry learning-rate multiplier (0.1 for reference-point and
    /// sampling-offset projections, 1.0 otherwise).
    pub lr_mult: f64,
}

/// How to fill a freshly allocated parameter.
pub enum Init {
    Zeros,
    Constant(f64),
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    /// Xavier-uniform for a `[fan_out, fan_in]` weight.
    Xavier { fan_in: usize, fan_out: usize },
    /// Explicit values (used by the deterministic attention init).
    Values(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    pub data: Vec<f64>,
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            data: Vec::new(),
            entries: Vec::new(),
        }
    }

    pub fn alloc(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        self.alloc_with_lr(name, shape, init, rng, 1.0)
    }

    pub fn alloc_with_lr(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
        lr_mult: f64,
    ) -> ParamId {
        let len: usize = shape.iter().product();
        let offset = self.data.len();
        let values = match init {
            Init::Zeros => vec![0.0; len],
            Init::Constant(c) => vec![c; len],
            Init::Normal(std) => (0..len)
                .map(|_| {
                    // Box-Muller; two uniforms per sample keeps the stream simple.
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect(),
            Init::Xavier { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            Init::Values(v) => {
                assert_eq!(v.len(), len);
                v
            }
        };
        self.data.extend_from_slice(&values);
        self.entries.push(ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
            len,
            lr_mult,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[f64] {
        let e = &self.entries[id.0];
        &self.data[e.offset..e.offset + e.len]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        let e = &self.entries[id.0];
        &mut self.data[e.offset..e.offset + e.len]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Save all parameters as a versioned binary checkpoint.
    ///
    /// Layout (little-endian): magic `DDCK`, format version `u32`, entry
    /// count `u32`, then per entry: name (u32 length + UTF-8 bytes), rank
    /// `u32`, dims `u64` each, values `f64` each.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(b"DDCK")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u32).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
            for &d in &e.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in &self.data[e.offset..e.offset + e.len] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Load values from `path` into this store, matching entries by name and
    /// verifying shapes.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"DDCK" {
            return Err(crate::DdError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != 1 {
            return Err(crate::DdError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let count = read_u32(&mut r)? as usize;
        let mut loaded = 0usize;
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| crate::DdError::Checkpoint("non-utf8 name".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let len: usize = shape.iter().product();
            let mut values = vec![0.0f64; len];
            for v in values.iter_mut() {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
            let id = self.find(&name).ok_or_else(|| {
                crate::DdError::Checkpoint(format!("unknown parameter `{name}` in checkpoint"))
            })?;
            let e = self.entry(id);
            if e.shape != shape {
                return Err(crate::DdError::Checkpoint(format!(
                    "shape mismatch for `{name}`: store {:?}, file {:?}",
                    e.shape, shape
                )));
            }
            self.get_mut(id).copy_from_slice(&values);
            loaded += 1;
        }
        if loaded != self.entries.len() {
            return Err(crate::DdError::Checkpoint(format!(
                "checkpoint has {loaded} of {} parameters",
                self.entries.len()
            )));
        }
        Ok(())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// A gradient buffer mirroring a [`ParamStore`]'s flat data.
#[derive(Clone)]
pub struct GradBuf(pub Vec<f64>);

impl GradBuf {
    pub fn zeros(store: &ParamStore) -> Self {
        Self(vec![0.0; store.len()])
    }

    #[inline]
    pub fn get_mut(&mut self, store: &ParamStore, id: ParamId) -> &mut [f64] {
        let e = store.entry(id);
        &mut self.0[e.offset..e.offset + e.len]
    }

    #[inline]
    pub fn get(&self, store: &ParamStore, id: ParamId) -> &[f64] {
        let e = store.entry(id);
        &self.0[e.offset..e.offset + e.len]
    }

    /// Accumulate another gradient buffer (fixed-order reduction).
    pub fn add_assign(&mut self, other: &GradBuf) {
        debug_assert_eq!(self.0.len(), other.0.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.0.iter_mut() {
            *v *= s;
        }
    }

    /// Global L2 norm, used for gradient clipping.
    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Adam with decoupled weight decay and per-entry lr multipliers.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; store.len()],
            v: vec![0.0; store.len()],
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grad: &GradBuf) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        // Walk entries so the lr multiplier is known per slice.
        let entries: Vec<(usize, usize, f64)> = store
            .entries()
            .iter()
            .map(|e| (e.offset, e.len, e.lr_mult))
            .collect();
        for (offset, len, lr_mult) in entries {
            let lr = self.lr * lr_mult;
            for i in offset..offset + len {
                let g = grad.0[i];
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = self.m[i] / bc1;
                let vhat = self.v[i] / bc2;
                let p = &mut store.data[i];
                *p -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
            }
        }
    }
}

/// Quick sanity guard used by training: all parameters finite.
pub fn assert_finite(store: &ParamStore) -> Result<()> {
    if store.data.iter().any(|v| !v.is_finite()) {
        return Err(crate::DdError::NonFinite("parameter store".into()));
    }
    Ok(())
}

/// Same guard for an activation buffer.
pub fn assert_finite_slice(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(crate::DdError::NonFinite(what.into()));
    }
    Ok(())
}

/// Convenience used in a few places: elementwise sigmoid of a slice.
pub fn sigmoid_slice(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| sigmoid(x)).collect()
}
