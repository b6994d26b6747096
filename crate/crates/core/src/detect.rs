//! Anchor-free per-token detection head.
//!
//! Every final-stage token predicts `num_classes` logits and four box
//! values. Boxes are decoded relative to the token's cell:
//! `cx = (col + σ(t₀)) / grid_w`, `cy = (row + σ(t₁)) / grid_h`,
//! `w = σ(t₂)`, `h = σ(t₃)`, all in normalized image coordinates.

use std::io::Write;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agnostic::sigmoid;
use crate::encoder::TokenMap;
use crate::error::{MipaError, Result};
use crate::nn::{Init, LayerNorm, LayerNormCache, Linear, ParamStore};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl BoundingBox {
    pub fn gt(cx: f64, cy: f64, w: f64, h: f64, class_id: usize) -> Self {
        Self {
            cx,
            cy,
            w,
            h,
            class_id,
            score: None,
        }
    }

    pub fn pred(cx: f64, cy: f64, w: f64, h: f64, class_id: usize, score: f64) -> Self {
        Self {
            score: Some(score),
            ..Self::gt(cx, cy, w, h, class_id)
        }
    }

    pub fn from_xyxy(x0: f64, y0: f64, x1: f64, y1: f64, class_id: usize) -> Self {
        Self::gt((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0, class_id)
    }

    pub fn xyxy(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn score(&self) -> f64 {
        self.score.unwrap_or(1.0)
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionSet {
    pub image_id: u64,
    pub boxes: Vec<BoundingBox>,
}

impl DetectionSet {
    pub fn new(image_id: u64, boxes: Vec<BoundingBox>) -> Self {
        Self { image_id, boxes }
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.xyxy();
    let [bx0, by0, bx1, by1] = b.xyxy();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Class-wise greedy non-maximum suppression. Boxes are visited by
/// descending score (ties by lower input index); a box is dropped when its
/// IoU with an already kept box of the same class exceeds `iou_threshold`.
pub fn nms(boxes: &[BoundingBox], iou_threshold: f64) -> Vec<BoundingBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| boxes[j].score().total_cmp(&boxes[i].score()).then(i.cmp(&j)));
    let mut kept: Vec<BoundingBox> = Vec::new();
    for i in order {
        let b = &boxes[i];
        if kept
            .iter()
            .all(|k| k.class_id != b.class_id || iou(k, b) <= iou_threshold)
        {
            kept.push(*b);
        }
    }
    kept
}

pub const NMS_IOU: f64 = 0.5;
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, Copy)]
pub struct DetHead {
    pub norm: LayerNorm,
    pub out: Linear,
    pub num_classes: usize,
}

#[derive(Debug, Clone)]
pub struct HeadCache<F> {
    norm: LayerNormCache<F>,
    normed: Array2<F>,
}

/// Regression and classification targets, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub cls: Array2<f64>,
    pub boxes: Vec<Option<[f64; 4]>>,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Targets {
    pub fn num_positive(&self) -> usize {
        self.boxes.iter().filter(|b| b.is_some()).count()
    }
}

/// Center-cell assignment: the cell containing a GT center is positive for
/// that box's class and regresses that box. When two centers share a cell
/// the larger box wins; equal areas keep the earlier box.
pub fn assign_targets(gt: &DetectionSet, grid_h: usize, grid_w: usize, num_classes: usize) -> Targets {
    let n = grid_h * grid_w;
    let mut winner: Vec<Option<&BoundingBox>> = vec![None; n];
    for b in &gt.boxes {
        let col = ((b.cx * grid_w as f64).floor() as usize).min(grid_w - 1);
        let row = ((b.cy * grid_h as f64).floor() as usize).min(grid_h - 1);
        let slot = &mut winner[row * grid_w + col];
        match slot {
            Some(prev) if prev.area() >= b.area() => {}
            _ => *slot = Some(b),
        }
    }
    let mut cls = Array2::zeros((n, num_classes));
    let boxes = winner
        .iter()
        .enumerate()
        .map(|(i, w)| {
            w.map(|b| {
                cls[[i, b.class_id]] = 1.0;
                [b.cx, b.cy, b.w, b.h]
            })
        })
        .collect();
    Targets {
        cls,
        boxes,
        grid_h,
        grid_w,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetLoss {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    /// `dL/draw`, same layout as the head output.
    pub d_raw: Array2<f64>,
}

fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Decode one token's four raw box values to normalized `cxcywh`.
pub fn decode_box(raw: &[f64], row: usize, col: usize, grid_h: usize, grid_w: usize) -> [f64; 4] {
    [
        (col as f64 + sigmoid(raw[0])) / grid_w as f64,
        (row as f64 + sigmoid(raw[1])) / grid_h as f64,
        sigmoid(raw[2]),
        sigmoid(raw[3]),
    ]
}

/// `L_d = L_c + λ_reg · L_r` for one image. `L_c` is the class-summed
/// logistic loss averaged over tokens; `L_r` is the squared error of the
/// decoded box averaged over positive tokens and the four coordinates.
pub fn detection_loss<F: Real>(raw: ArrayView2<'_, F>, targets: &Targets, lambda_reg: f64) -> Result<DetLoss> {
    let c = targets.cls.ncols();
    let t = raw.nrows();
    if raw.ncols() != c + 4 || t != targets.boxes.len() {
        return Err(MipaError::Shape {
            expected: format!("{} x {}", targets.boxes.len(), c + 4),
            got: format!("{} x {}", t, raw.ncols()),
        });
    }
    let mut d_raw = Array2::zeros((t, c + 4));
    let mut cls = 0.0;
    for i in 0..t {
        for k in 0..c {
            let z = raw[[i, k]].as_f64();
            let y = targets.cls[[i, k]];
            cls += bce_with_logits(z, y);
            d_raw[[i, k]] = (sigmoid(z) - y) / t as f64;
        }
    }
    cls /= t as f64;
    let positives = targets.num_positive();
    let mut reg = 0.0;
    if positives > 0 {
        let denom = 4.0 * positives as f64;
        for (i, target) in targets.boxes.iter().enumerate() {
            let Some(tb) = target else { continue };
            let (row, col) = (i / targets.grid_w, i % targets.grid_w);
            let vals: Vec<f64> = (0..4).map(|j| raw[[i, c + j]].as_f64()).collect();
            let pb = decode_box(&vals, row, col, targets.grid_h, targets.grid_w);
            let scale = [1.0 / targets.grid_w as f64, 1.0 / targets.grid_h as f64, 1.0, 1.0];
            for j in 0..4 {
                let e = pb[j] - tb[j];
                reg += e * e / denom;
                let s = sigmoid(vals[j]);
                d_raw[[i, c + j]] = lambda_reg * 2.0 * e / denom * scale[j] * s * (1.0 - s);
            }
        }
    }
    let total = cls + lambda_reg * reg;
    if !total.is_finite() {
        return Err(MipaError::NonFinite {
            what: "detection loss".into(),
            step: 0,
        });
    }
    Ok(DetLoss {
        total,
        cls,
        reg,
        d_raw,
    })
}

impl DetHead {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        dim: usize,
        num_classes: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let norm = LayerNorm::new(store, "head.norm", dim, rng);
        let out = Linear::new(store, "head.out", dim, num_classes + 4, init, rng);
        Self {
            norm,
            out,
            num_classes,
        }
    }

    pub fn forward<F: Real>(&self, p: &ParamStore<F>, tokens: &TokenMap<F>) -> (Array2<F>, HeadCache<F>) {
        let (normed, norm) = self.norm.forward(p, tokens.tokens.view());
        let raw = self.out.forward(p, normed.view());
        (raw, HeadCache { norm, normed })
    }

    pub fn backward<F: Real>(
        &self,
        p: &ParamStore<F>,
        g: &mut ParamStore<F>,
        cache: &HeadCache<F>,
        d_raw: &Array2<f64>,
    ) -> Array2<F> {
        let d = d_raw.mapv(F::c);
        let dn = self.out.backward(p, g, cache.normed.view(), d.view());
        self.norm.backward(p, g, &cache.norm, dn.view())
    }

    /// Decode every token, keep class scores above `score_threshold`, then
    /// apply class-wise NMS at IoU 0.5.
    pub fn predict<F: Real>(
        &self,
        p: &ParamStore<F>,
        tokens: &TokenMap<F>,
        score_threshold: f64,
        image_id: u64,
    ) -> DetectionSet {
        let (raw, _) = self.forward(p, tokens);
        decode_predictions(raw.view(), tokens.grid_h, tokens.grid_w, self.num_classes, score_threshold, image_id)
    }
}

pub fn decode_predictions<F: Real>(
    raw: ArrayView2<'_, F>,
    grid_h: usize,
    grid_w: usize,
    num_classes: usize,
    score_threshold: f64,
    image_id: u64,
) -> DetectionSet {
    let mut cands = Vec::new();
    for (i, row) in raw.rows().into_iter().enumerate() {
        let vals: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        let [cx, cy, w, h] = decode_box(&vals[num_classes..], i / grid_w, i % grid_w, grid_h, grid_w);
        for (k, &z) in vals[..num_classes].iter().enumerate() {
            let s = sigmoid(z);
            if s > score_threshold {
                cands.push(BoundingBox::pred(cx, cy, w, h, k, s));
            }
        }
    }
    DetectionSet::new(image_id, nms(&cands, NMS_IOU))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct PredictionRecord {
    pub image_id: u64,
    pub class_id: usize,
    pub score: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// One JSON object per line per predicted box.
pub fn write_prediction_dump<W: Write>(mut out: W, sets: &[DetectionSet]) -> Result<()> {
    for set in sets {
        for b in &set.boxes {
            let rec = PredictionRecord {
                image_id: set.image_id,
                class_id: b.class_id,
                score: b.score(),
                cx: b.cx,
                cy: b.cy,
                w: b.w,
                h: b.h,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn read_prediction_dump(text: &str) -> Result<Vec<DetectionSet>> {
    let mut sets: Vec<DetectionSet> = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: PredictionRecord = serde_json::from_str(line)?;
        let b = BoundingBox::pred(r.cx, r.cy, r.w, r.h, r.class_id, r.score);
        match sets.iter_mut().find(|s| s.image_id == r.image_id) {
            Some(s) => s.boxes.push(b),
            None => sets.push(DetectionSet::new(r.image_id, vec![b])),
        }
    }
    Ok(sets)
}
