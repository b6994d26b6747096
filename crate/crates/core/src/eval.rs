//! COCO-style detection evaluation.
//!
//! Greedy matching in score order, 101-point interpolated precision, and AP
//! averaged over IoU thresholds 0.50:0.05:0.95. Reports carry one row per
//! modality plus their arithmetic mean.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::detect::{iou, BoundingBox, DetectionSet};
use crate::exec::Execution;

pub use crate::detect::iou as box_iou;

pub const RECALL_POINTS: usize = 101;

pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Greedy per-image matching for one class. Predictions are visited by
/// descending score; each takes the unmatched GT with the highest IoU at or
/// above the threshold (first index on ties). Returns one TP flag per
/// prediction, in the visiting order, with its score.
pub fn greedy_match(preds: &[&BoundingBox], gts: &[&BoundingBox], iou_threshold: f64) -> Vec<(f64, bool)> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score().total_cmp(&preds[a].score()).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|pi| {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if taken[gi] {
                    continue;
                }
                let v = iou(preds[pi], g);
                if v >= iou_threshold && best.map_or(true, |(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, _)) = best {
                taken[gi] = true;
            }
            (preds[pi].score(), best.is_some())
        })
        .collect()
}

/// Area under the 101-point interpolated precision/recall curve given
/// score-ranked TP flags and the number of ground-truth boxes.
pub fn interpolated_ap(mut ranked: Vec<(f64, bool)>, num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    // Stable sort keeps per-image visiting order for equal scores.
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    for (k, &(_, hit)) in ranked.iter().enumerate() {
        tp += hit as usize;
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    for r in 0..RECALL_POINTS {
        let thr = r as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < thr);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    total / RECALL_POINTS as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    /// `None` when a class has neither GT nor predictions.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

fn index_gts(gts: &[DetectionSet]) -> HashMap<u64, &DetectionSet> {
    gts.iter().map(|g| (g.image_id, g)).collect()
}

/// AP at one IoU threshold. Classes with GT but no matching predictions get
/// 0; classes with predictions but no GT get 0; classes with neither are
/// excluded from the mean.
pub fn average_precision(
    preds: &[DetectionSet],
    gts: &[DetectionSet],
    iou_threshold: f64,
    num_classes: usize,
) -> ApResult {
    average_precision_with(preds, gts, iou_threshold, num_classes, Execution::Sequential)
}

pub fn average_precision_with(
    preds: &[DetectionSet],
    gts: &[DetectionSet],
    iou_threshold: f64,
    num_classes: usize,
    exec: Execution,
) -> ApResult {
    let gt_index = index_gts(gts);
    let empty = DetectionSet::default();
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let num_gt: usize = gts
                .iter()
                .map(|g| g.boxes.iter().filter(|b| b.class_id == c).count())
                .sum();
            let per_image = exec.map(preds, |p| {
                let gt = gt_index.get(&p.image_id).copied().unwrap_or(&empty);
                let pc: Vec<&BoundingBox> = p.boxes.iter().filter(|b| b.class_id == c).collect();
                let gc: Vec<&BoundingBox> = gt.boxes.iter().filter(|b| b.class_id == c).collect();
                greedy_match(&pc, &gc, iou_threshold)
            });
            let ranked: Vec<(f64, bool)> = per_image.into_iter().flatten().collect();
            match (num_gt, ranked.is_empty()) {
                (0, true) => None,
                (0, false) => Some(0.0),
                _ => Some(interpolated_ap(ranked, num_gt)),
            }
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    ApResult { per_class, mean }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ApTriple {
    pub ap50: f64,
    pub ap75: f64,
    /// Mean over IoU 0.50:0.05:0.95.
    pub ap: f64,
}

impl ApTriple {
    pub fn mean_of(a: &ApTriple, b: &ApTriple) -> ApTriple {
        ApTriple {
            ap50: (a.ap50 + b.ap50) / 2.0,
            ap75: (a.ap75 + b.ap75) / 2.0,
            ap: (a.ap + b.ap) / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityMetrics {
    pub per_class: Vec<Option<ApTriple>>,
    pub aggregate: ApTriple,
}

pub fn evaluate_modality(
    preds: &[DetectionSet],
    gts: &[DetectionSet],
    num_classes: usize,
    exec: Execution,
) -> ModalityMetrics {
    let runs: Vec<ApResult> = coco_iou_thresholds()
        .into_iter()
        .map(|t| average_precision_with(preds, gts, t, num_classes, exec))
        .collect();
    let per_class = (0..num_classes)
        .map(|c| {
            runs[0].per_class[c].map(|ap50| ApTriple {
                ap50,
                ap75: runs[5].per_class[c].unwrap_or(0.0),
                ap: runs.iter().map(|r| r.per_class[c].unwrap_or(0.0)).sum::<f64>() / runs.len() as f64,
            })
        })
        .collect();
    ModalityMetrics {
        per_class,
        aggregate: ApTriple {
            ap50: runs[0].mean,
            ap75: runs[5].mean,
            ap: runs.iter().map(|r| r.mean).sum::<f64>() / runs.len() as f64,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rgb: Option<ModalityMetrics>,
    pub ir: Option<ModalityMetrics>,
    pub average: Option<ApTriple>,
    pub partial: bool,
}

/// Flat CSV/JSON schema of a report.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalRow {
    pub ap50_rgb: Option<f64>,
    pub ap50_ir: Option<f64>,
    pub ap50_avg: Option<f64>,
    pub ap75_rgb: Option<f64>,
    pub ap75_ir: Option<f64>,
    pub ap75_avg: Option<f64>,
    pub ap_rgb: Option<f64>,
    pub ap_ir: Option<f64>,
    pub ap_avg: Option<f64>,
}

impl EvalReport {
    pub fn from_metrics(rgb: Option<ModalityMetrics>, ir: Option<ModalityMetrics>) -> Self {
        let average = match (&rgb, &ir) {
            (Some(a), Some(b)) => Some(ApTriple::mean_of(&a.aggregate, &b.aggregate)),
            _ => None,
        };
        let partial = rgb.is_none() || ir.is_none();
        Self {
            rgb,
            ir,
            average,
            partial,
        }
    }

    /// Report from aggregate numbers alone (no per-class breakdown).
    pub fn from_aggregates(rgb: ApTriple, ir: ApTriple) -> Self {
        let wrap = |a| ModalityMetrics {
            per_class: vec![],
            aggregate: a,
        };
        Self::from_metrics(Some(wrap(rgb)), Some(wrap(ir)))
    }

    pub fn row(&self) -> EvalRow {
        let r = self.rgb.as_ref().map(|m| m.aggregate);
        let i = self.ir.as_ref().map(|m| m.aggregate);
        let a = self.average;
        EvalRow {
            ap50_rgb: r.map(|t| t.ap50),
            ap50_ir: i.map(|t| t.ap50),
            ap50_avg: a.map(|t| t.ap50),
            ap75_rgb: r.map(|t| t.ap75),
            ap75_ir: i.map(|t| t.ap75),
            ap75_avg: a.map(|t| t.ap75),
            ap_rgb: r.map(|t| t.ap),
            ap_ir: i.map(|t| t.ap),
            ap_avg: a.map(|t| t.ap),
        }
    }

    /// JSON document: the flat schema keys plus the full breakdown.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self.row()).expect("plain struct");
        let obj = v.as_object_mut().expect("object");
        obj.insert("partial".into(), self.partial.into());
        obj.insert("rgb".into(), serde_json::to_value(&self.rgb).expect("plain struct"));
        obj.insert("ir".into(), serde_json::to_value(&self.ir).expect("plain struct"));
        v
    }
}

pub fn build_report(
    preds_rgb: Option<&[DetectionSet]>,
    preds_ir: Option<&[DetectionSet]>,
    gts: &[DetectionSet],
    num_classes: usize,
    exec: Execution,
) -> EvalReport {
    EvalReport::from_metrics(
        preds_rgb.map(|p| evaluate_modality(p, gts, num_classes, exec)),
        preds_ir.map(|p| evaluate_modality(p, gts, num_classes, exec)),
    )
}
