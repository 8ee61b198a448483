use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::assignment::GroundTruth;
use crate::error::{invalid, Result};
use crate::geometry::{iou, NormalizedBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub box_: NormalizedBox,
    pub class_id: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    /// Mean over the requested IoU thresholds.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// `(threshold, class-mean AP)`.
    pub per_threshold: Vec<(f64, f64)>,
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

const RECALL_POINTS: usize = 101;

/// 101-point interpolated AP for one class at one IoU threshold.
///
/// Detections are ranked by confidence, ties broken by image then box
/// coordinates, so the result does not depend on input order. Each
/// detection greedily claims the best-overlapping unclaimed object in its
/// image.
fn class_ap(
    results: &[Vec<DetectionResult>],
    gts: &[Vec<GroundTruth>],
    class: usize,
    threshold: f64,
    num_gt: usize,
) -> f64 {
    let mut dets: Vec<(usize, &DetectionResult)> = results
        .iter()
        .enumerate()
        .flat_map(|(img, ds)| ds.iter().filter(|d| d.class_id == class).map(move |d| (img, d)))
        .collect();
    dets.sort_by(|(ia, a), (ib, b)| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(Ordering::Equal)
            .then(ia.cmp(ib))
            .then_with(|| {
                a.box_
                    .to_array()
                    .partial_cmp(&b.box_.to_array())
                    .unwrap_or(Ordering::Equal)
            })
    });

    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(dets.len());
    let mut recall = Vec::with_capacity(dets.len());
    for (rank, (img, d)) in dets.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts[*img].iter().enumerate() {
            if gt.class_id != class || claimed[*img][g] {
                continue;
            }
            let o = iou(d.box_, gt.box_);
            if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            claimed[*img][g] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // precision envelope, non-increasing in rank
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    let mut idx = 0;
    for r in 0..RECALL_POINTS {
        let target = r as f64 / (RECALL_POINTS - 1) as f64;
        while idx < recall.len() && recall[idx] < target - 1e-12 {
            idx += 1;
        }
        if idx < recall.len() {
            total += precision[idx];
        }
    }
    total / RECALL_POINTS as f64
}

/// Mean over classes that have at least one ground truth; 0 if none do.
fn mean_ap_at(results: &[Vec<DetectionResult>], gts: &[Vec<GroundTruth>], threshold: f64) -> f64 {
    let num_classes = gts
        .iter()
        .flatten()
        .map(|g| g.class_id + 1)
        .max()
        .unwrap_or(0);
    let mut sum = 0.0;
    let mut count = 0;
    for class in 0..num_classes {
        let n = gts.iter().flatten().filter(|g| g.class_id == class).count();
        if n == 0 {
            continue;
        }
        sum += class_ap(results, gts, class, threshold, n);
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Per-class, per-threshold interpolated precision/recall integration.
///
/// `results[i]` and `gts[i]` belong to image `i`. Classes without ground
/// truth are skipped; detections of such classes are ignored.
pub fn ap_eval(
    results: &[Vec<DetectionResult>],
    gts: &[Vec<GroundTruth>],
    iou_thresholds: &[f64],
) -> Result<ApSummary> {
    if results.len() != gts.len() {
        return Err(invalid(format!(
            "{} result lists for {} images",
            results.len(),
            gts.len()
        )));
    }
    if let Some(t) = iou_thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(invalid(format!("IoU threshold {t} outside (0,1]")));
    }
    let per_threshold: Vec<(f64, f64)> = iou_thresholds
        .iter()
        .map(|&t| (t, mean_ap_at(results, gts, t)))
        .collect();
    let lookup = |t: f64| {
        per_threshold
            .iter()
            .find(|(x, _)| (x - t).abs() < 1e-9)
            .map(|p| p.1)
            .unwrap_or_else(|| mean_ap_at(results, gts, t))
    };
    let ap = if per_threshold.is_empty() {
        0.0
    } else {
        per_threshold.iter().map(|p| p.1).sum::<f64>() / per_threshold.len() as f64
    };
    Ok(ApSummary {
        ap,
        ap50: lookup(0.5),
        ap75: lookup(0.75),
        per_threshold,
    })
}
