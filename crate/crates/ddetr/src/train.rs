//! Training loop: batched Adam with per-tensor learning-rate multipliers,
//! deterministic data-parallel gradient accumulation, gradient clipping,
//! and JSONL/CSV metric export.

use crate::data::Dataset;
use crate::eval::{compute_ap, ApSummary, Record};
use crate::loss::{set_loss, LossParts, LossWeights};
use crate::macs;
use crate::param::{assert_finite, Adam, GradBuf, ParamStore};
use crate::transformer::{extract_detections, Model, OutputGrads};
use crate::{DdError, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Epoch (0-based) at which the learning rate is multiplied by 0.1.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_drop_epoch: Option<usize>,
    /// Global L2 gradient-norm clip.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 1e-4,
            lr_drop_epoch: Some(30),
            grad_clip: 0.1,
            seed: 0,
        }
    }
}

/// One optimizer step's telemetry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub grad_norm: f64,
    pub macs: u64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub metrics: Vec<StepMetrics>,
    pub final_loss: f64,
}

/// Forward + loss + backward for a single image; the returned gradient
/// buffer holds this image's full parameter gradient.
pub fn image_loss_and_grads(
    model: &Model,
    store: &ParamStore,
    image: &[f64],
    size: usize,
    labels: &[Record],
    w: &LossWeights,
) -> Result<(LossParts, GradBuf)> {
    let (out, cache) = model.forward(store, image, size, size)?;
    let n = model.cfg.n_queries;
    let nc = model.cfg.n_classes;
    let gt_classes: Vec<usize> = labels.iter().map(|r| r.class).collect();
    let gt_boxes: Vec<f64> = labels
        .iter()
        .flat_map(|r| [r.cx, r.cy, r.w, r.h])
        .collect();

    let mut og = OutputGrads::default();
    let mut parts = LossParts::default();
    for lp in &out.layer_preds {
        let sl = set_loss(&lp.class_logits, &lp.boxes, n, nc, &gt_classes, &gt_boxes, w)?;
        parts.add(&sl.parts);
        og.layer_class.push(sl.grad_logits);
        og.layer_boxes.push(sl.grad_boxes);
    }
    if let Some(fs) = &out.first_stage {
        // Binary objectness supervision over every encoder token.
        let t = fs.class_logits.len();
        let bin_classes = vec![0usize; gt_classes.len()];
        let sl = set_loss(&fs.class_logits, &fs.boxes, t, 1, &bin_classes, &gt_boxes, w)?;
        parts.add(&sl.parts);
        og.first_stage_class = Some(sl.grad_logits);
        og.first_stage_boxes = Some(sl.grad_boxes);
    }
    if !parts.total.is_finite() {
        return Err(DdError::NonFinite("loss".into()));
    }
    let mut gb = GradBuf::zeros(store);
    model.backward(store, &cache, &og, &mut gb);
    Ok((parts, gb))
}

/// Train in place. `on_step` observes every optimizer step (metric sinks,
/// progress printing).
pub fn train_model(
    store: &mut ParamStore,
    model: &Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    on_step: impl FnMut(&StepMetrics),
) -> Result<TrainReport> {
    train_model_with(store, model, ds, cfg, on_step, |_, _| {})
}

/// As [`train_model`], but `on_epoch` additionally observes the parameters
/// after each epoch (e.g. for tracking validation score against epoch count).
pub fn train_model_with(
    store: &mut ParamStore,
    model: &Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepMetrics),
    mut on_epoch: impl FnMut(usize, &ParamStore),
) -> Result<TrainReport> {
    if ds.is_empty() {
        return Err(DdError::Config("empty training dataset".into()));
    }
    let w = LossWeights::default();
    let mut opt = Adam::new(store, cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        if Some(epoch) == cfg.lr_drop_epoch {
            opt.lr *= 0.1;
        }
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng);

        for batch in order.chunks(cfg.batch_size) {
            let t0 = std::time::Instant::now();
            macs::reset();
            // Each image runs independently; results come back in batch
            // order, so the sequential reduction below is deterministic
            // regardless of thread scheduling.
            let results: Vec<Result<(LossParts, GradBuf)>> = batch
                .par_iter()
                .map(|&i| {
                    image_loss_and_grads(model, store, &ds.images[i], ds.image_size, &ds.labels[i], &w)
                })
                .collect();

            let mut parts = LossParts::default();
            let mut grad = GradBuf::zeros(store);
            for r in results {
                let (p, g) = r?;
                parts.add(&p);
                grad.add_assign(&g);
            }
            let inv = 1.0 / batch.len() as f64;
            grad.scale(inv);
            parts.class *= inv;
            parts.l1 *= inv;
            parts.giou *= inv;
            parts.total *= inv;

            let norm = grad.l2_norm();
            if !norm.is_finite() {
                return Err(DdError::Diverged(format!(
                    "non-finite gradient at epoch {epoch} step {step}"
                )));
            }
            if norm > cfg.grad_clip {
                grad.scale(cfg.grad_clip / norm);
            }
            opt.step(store, &grad);
            assert_finite(store).map_err(|_| {
                DdError::Diverged(format!("non-finite parameters at epoch {epoch} step {step}"))
            })?;

            let m = StepMetrics {
                epoch,
                step,
                loss: parts.total,
                class: parts.class,
                l1: parts.l1,
                giou: parts.giou,
                grad_norm: norm,
                macs: macs::read(),
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            };
            report.final_loss = m.loss;
            on_step(&m);
            report.metrics.push(m);
            step += 1;
        }
        on_epoch(epoch, store);
    }
    Ok(report)
}

/// Detections for one image from the final decoder layer.
pub fn predict(
    model: &Model,
    store: &ParamStore,
    image: &[f64],
    size: usize,
    image_id: usize,
    top_k: usize,
) -> Result<Vec<Record>> {
    let (out, _) = model.forward(store, image, size, size)?;
    let last = out.layer_preds.last().expect("decoder has layers");
    Ok(extract_detections(
        last,
        model.cfg.n_queries,
        model.cfg.n_classes,
        image_id,
        top_k,
    ))
}

/// Run the model over a dataset and score it.
pub fn evaluate(model: &Model, store: &ParamStore, ds: &Dataset, top_k: usize) -> Result<ApSummary> {
    let preds: Vec<Result<Vec<Record>>> = ds
        .images
        .par_iter()
        .enumerate()
        .map(|(i, img)| predict(model, store, img, ds.image_size, i, top_k))
        .collect();
    let mut all = Vec::new();
    for p in preds {
        all.extend(p?);
    }
    Ok(compute_ap(&all, &ds.all_labels()))
}

/// Append step metrics as JSON lines.
pub fn write_metrics(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for m in metrics {
        serde_json::to_writer(&mut f, m)?;
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

/// Flatten metrics to a CSV of training curves.
pub fn export_curves(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,epoch,loss,class,l1,giou,grad_norm,macs,wall_ms")?;
    for m in metrics {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            m.step, m.epoch, m.loss, m.class, m.l1, m.giou, m.grad_norm, m.macs, m.wall_ms
        )?;
    }
    f.flush()?;
    Ok(())
}
