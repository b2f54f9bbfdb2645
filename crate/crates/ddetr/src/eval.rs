//! Detection evaluation: average precision over IoU thresholds with size
//! breakdowns, plus the JSON-lines interchange format shared by the
//! generator, trainer, and evaluator.

use crate::boxes::{iou, BoxN};
use crate::Result;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// One labeled or predicted object. `score` is present on predictions and
/// absent on ground truth.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Record {
    pub image_id: usize,
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl Record {
    pub fn boxn(&self) -> BoxN {
        BoxN::new(self.cx, self.cy, self.w, self.h)
    }
}

pub fn write_jsonl(path: &Path, records: &[Record]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Record>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Area-fraction thresholds for the size buckets (boxes are normalized, so
/// `w * h` is already a fraction of the image).
pub const SMALL_AREA: f64 = 0.01;
pub const LARGE_AREA: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq)]
enum SizeBucket {
    Small,
    Medium,
    Large,
}

fn bucket_of(area: f64) -> SizeBucket {
    if area < SMALL_AREA {
        SizeBucket::Small
    } else if area > LARGE_AREA {
        SizeBucket::Large
    } else {
        SizeBucket::Medium
    }
}

/// Aggregate AP metrics.
#[derive(Debug, Clone, Serialize, Default)]
pub struct ApSummary {
    /// Mean AP over IoU thresholds 0.50:0.05:0.95.
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
    pub n_gt: usize,
    pub n_det: usize,
}

/// AP for one class at one IoU threshold. Detections greedily claim the
/// highest-IoU unmatched ground truth in their image, in descending score
/// order (ties broken by image id then insertion order, so the result is
/// deterministic). Ground truth outside `bucket` (when given) is "ignored":
/// it can absorb a detection without that detection counting either way.
fn ap_single(
    dets: &[&Record],
    gts: &[&Record],
    thr: f64,
    bucket: Option<SizeBucket>,
) -> Option<f64> {
    let counted = |g: &Record| bucket.is_none_or(|b| bucket_of(g.boxn().area()) == b);
    let n_pos = gts.iter().filter(|g| counted(g)).count();
    if n_pos == 0 {
        return None;
    }

    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (dets[a].score.unwrap_or(0.0), dets[b].score.unwrap_or(0.0));
        sb.partial_cmp(&sa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(dets[a].image_id.cmp(&dets[b].image_id))
            .then(a.cmp(&b))
    });

    let mut gt_used = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.len());
    for &d in &order {
        let det = dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt.image_id != det.image_id || gt_used[gi] {
                continue;
            }
            let v = iou(det.boxn(), gt.boxn());
            if v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                gt_used[gi] = true;
                if counted(gts[gi]) {
                    tp.push(true);
                } // matched an ignored gt: drop from the ranking entirely
            }
            None => tp.push(false),
        }
    }

    // All-point interpolated AP.
    let mut ap = 0.0;
    let mut n_tp = 0usize;
    // precision at each rank; integrate with running max from the right
    let precisions: Vec<f64> = tp
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            if t {
                n_tp += 1;
            }
            n_tp as f64 / (i + 1) as f64
        })
        .collect();
    let recalls: Vec<f64> = {
        let mut n = 0usize;
        tp.iter()
            .map(|&t| {
                if t {
                    n += 1;
                }
                n as f64 / n_pos as f64
            })
            .collect()
    };
    let mut max_prec = 0.0f64;
    let mut prev_recall = 0.0;
    // walk from the end so precision is the max over later ranks
    let mut steps: Vec<(f64, f64)> = Vec::new();
    for i in (0..tp.len()).rev() {
        max_prec = max_prec.max(precisions[i]);
        if tp[i] {
            steps.push((recalls[i], max_prec));
        }
    }
    steps.reverse();
    for (r, p) in steps {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    Some(ap)
}

/// Thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Compute AP metrics from flat prediction and ground-truth record lists.
/// Per-class APs are averaged over classes that appear in the ground truth.
pub fn compute_ap(predictions: &[Record], ground_truth: &[Record]) -> ApSummary {
    let mut classes: Vec<usize> = ground_truth.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();

    let thrs = iou_thresholds();
    let mut summary = ApSummary {
        n_gt: ground_truth.len(),
        n_det: predictions.len(),
        ..Default::default()
    };
    if classes.is_empty() {
        return summary;
    }

    let mut per_thr = vec![Vec::new(); thrs.len()];
    let mut small = Vec::new();
    let mut medium = Vec::new();
    let mut large = Vec::new();
    for &c in &classes {
        let dets: Vec<&Record> = predictions.iter().filter(|d| d.class == c).collect();
        let gts: Vec<&Record> = ground_truth.iter().filter(|g| g.class == c).collect();
        for (ti, &t) in thrs.iter().enumerate() {
            if let Some(ap) = ap_single(&dets, &gts, t, None) {
                per_thr[ti].push(ap);
            }
        }
        for (bucket, sink) in [
            (SizeBucket::Small, &mut small),
            (SizeBucket::Medium, &mut medium),
            (SizeBucket::Large, &mut large),
        ] {
            let aps: Vec<f64> = thrs
                .iter()
                .filter_map(|&t| ap_single(&dets, &gts, t, Some(bucket)))
                .collect();
            if !aps.is_empty() {
                sink.push(aps.iter().sum::<f64>() / aps.len() as f64);
            }
        }
    }

    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let thr_means: Vec<f64> = per_thr.iter().map(|v| mean(v)).collect();
    summary.map = mean(&thr_means);
    summary.ap50 = thr_means[0];
    summary.ap75 = thr_means[5];
    summary.ap_small = mean(&small);
    summary.ap_medium = mean(&medium);
    summary.ap_large = mean(&large);
    summary
}
