//! Detection evaluation: IoU, greedy matching, all-point AP, mAP@0.5,
//! and accuracy / R² for the non-detector models.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::model::{self, DetectorOutput, ModelSpec, Output, Sample, Target};
use crate::params::ParamSet;

/// Normalized `cx, cy, w, h` box with a class id (YOLO convention).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub class_id: usize,
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl GroundTruthBox {
    pub fn new(class_id: usize, cx: f32, cy: f32, w: f32, h: f32) -> Result<Self, String> {
        let b = Self { class_id, cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [("cx", self.cx), ("cy", self.cy)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name}={v} outside [0,1]"));
            }
        }
        for (name, v) in [("w", self.w), ("h", self.h)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(format!("{name}={v} outside (0,1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
    pub confidence: f32,
}

impl Detection {
    pub fn from_box(b: &GroundTruthBox, confidence: f32) -> Self {
        Self {
            class_id: b.class_id,
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            h: b.h,
            confidence,
        }
    }
}

/// Anything with normalized center/size geometry.
pub trait BoxGeometry {
    fn cxcywh(&self) -> [f32; 4];

    /// `[x1, y1, x2, y2]` with corners clamped to the unit square.
    fn corners(&self) -> [f64; 4] {
        let [cx, cy, w, h] = self.cxcywh().map(f64::from);
        let c = |v: f64| v.clamp(0.0, 1.0);
        [c(cx - w / 2.0), c(cy - h / 2.0), c(cx + w / 2.0), c(cy + h / 2.0)]
    }
}

impl BoxGeometry for GroundTruthBox {
    fn cxcywh(&self) -> [f32; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

impl BoxGeometry for Detection {
    fn cxcywh(&self) -> [f32; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

/// IoU of two corner boxes `[x1, y1, x2, y2]`; 0 when the union is empty.
pub fn iou_corners(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn iou(a: &impl BoxGeometry, b: &impl BoxGeometry) -> f64 {
    iou_corners(a.corners(), b.corners())
}

/// Indices of `dets` ordered by descending confidence, ties by input order.
fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    order
}

/// Greedy matching for one image and one class. Returns, per detection in
/// input order, the index of the ground truth it claimed (`None` = FP).
pub fn match_detections(dets: &[Detection], gts: &[GroundTruthBox], iou_thresh: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    let mut result = vec![None; dets.len()];
    for i in confidence_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou(&dets[i], gt);
            if v >= iou_thresh && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            result[i] = Some(g);
        }
    }
    result
}

/// All-point interpolated AP over `(confidence, is_tp)` pairs.
pub fn average_precision(scored: &[(f32, bool)], gt_count: usize) -> f64 {
    if gt_count == 0 || scored.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));

    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for i in order {
        if scored[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / gt_count as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    // Precision envelope: running max from the right.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Per-class greedy non-maximum suppression.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in confidence_order(dets) {
        let d = &dets[i];
        if kept.iter().all(|k| k.class_id != d.class_id || iou(k, d) <= iou_thresh) {
            kept.push(*d);
        }
    }
    kept
}

/// One detection per cell whose objectness reaches `conf_thresh`.
pub fn decode_detections(out: &DetectorOutput, conf_thresh: f32) -> Vec<Detection> {
    let s = out.grid();
    let mut dets = Vec::new();
    for row in 0..s {
        for col in 0..s {
            let cell = out.cell(row, col);
            if cell.objectness < conf_thresh {
                continue;
            }
            let class_id = cell
                .class_probs
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (c, &p)| if p > best.1 { (c, p) } else { best })
                .0;
            dets.push(Detection {
                class_id,
                cx: (col as f32 + cell.cx) / s as f32,
                cy: (row as f32 + cell.cy) / s as f32,
                w: cell.w,
                h: cell.h,
                confidence: cell.objectness,
            });
        }
    }
    dets
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub conf_thresh: f32,
    pub iou_thresh: f64,
    pub nms_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            conf_thresh: 0.25,
            iou_thresh: 0.5,
            nms_iou: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMatches {
    pub image: usize,
    pub detections: Vec<Detection>,
    /// Claimed ground-truth index per detection, `None` for false positives.
    pub matched_gt: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// AP at the IoU threshold; `None` for classes without ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub ground_truths: usize,
    pub images: Vec<ImageMatches>,
}

impl EvalReport {
    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn to_markdown(&self, class_names: &[String]) -> String {
        let mut s = String::from("| Class | AP@0.5 |\n|---|---|\n");
        for (c, ap) in self.per_class_ap.iter().enumerate() {
            let name = class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}"));
            match ap {
                Some(ap) => writeln!(s, "| {name} | {ap:.4} |").unwrap(),
                None => writeln!(s, "| {name} | n/a |").unwrap(),
            }
        }
        writeln!(s, "| **mAP** | {:.4} |", self.map).unwrap();
        writeln!(
            s,
            "\nprecision {:.4}, recall {:.4}, TP {}, FP {}, GT {}",
            self.precision, self.recall, self.true_positives, self.false_positives, self.ground_truths
        )
        .unwrap();
        s
    }
}

/// Report over already-decoded detections, one list per image.
pub fn evaluate_predictions(
    predictions: &[Vec<Detection>],
    ground_truth: &[Vec<GroundTruthBox>],
    classes: usize,
    cfg: &EvalConfig,
) -> EvalReport {
    assert_eq!(predictions.len(), ground_truth.len(), "one prediction list per image");
    let mut scored: Vec<Vec<(f32, bool)>> = vec![Vec::new(); classes];
    let mut gt_counts = vec![0usize; classes];
    let mut images = Vec::with_capacity(predictions.len());
    let (mut tp, mut fp) = (0usize, 0usize);

    for (image, (dets, gts)) in predictions.iter().zip(ground_truth).enumerate() {
        let mut matched_gt = vec![None; dets.len()];
        for class in 0..classes {
            let det_idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class_id == class).collect();
            let gt_idx: Vec<usize> = (0..gts.len()).filter(|&i| gts[i].class_id == class).collect();
            gt_counts[class] += gt_idx.len();
            let class_dets: Vec<Detection> = det_idx.iter().map(|&i| dets[i]).collect();
            let class_gts: Vec<GroundTruthBox> = gt_idx.iter().map(|&i| gts[i]).collect();
            let m = match_detections(&class_dets, &class_gts, cfg.iou_thresh);
            for (k, &i) in det_idx.iter().enumerate() {
                matched_gt[i] = m[k].map(|g| gt_idx[g]);
                scored[class].push((dets[i].confidence, m[k].is_some()));
                if dets[i].confidence >= cfg.conf_thresh {
                    if m[k].is_some() {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
        }
        images.push(ImageMatches {
            image,
            detections: dets.clone(),
            matched_gt,
        });
    }

    let per_class_ap: Vec<Option<f64>> = (0..classes)
        .map(|c| (gt_counts[c] > 0).then(|| average_precision(&scored[c], gt_counts[c])))
        .collect();
    let present: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    let ground_truths: usize = gt_counts.iter().sum();
    EvalReport {
        per_class_ap,
        map,
        precision: if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 },
        recall: if ground_truths == 0 {
            0.0
        } else {
            tp as f64 / ground_truths as f64
        },
        true_positives: tp,
        false_positives: fp,
        ground_truths,
        images,
    }
}

/// Decoded, NMS-filtered detections for one image.
pub fn predict(spec: &ModelSpec, params: &ParamSet, input: &[f32], cfg: &EvalConfig) -> Result<Vec<Detection>, ModelError> {
    match model::forward(spec, params, input)? {
        Output::Grid(out) => Ok(nms(&decode_detections(&out, cfg.conf_thresh), cfg.nms_iou)),
        _ => Err(ModelError::TargetMismatch("detector evaluation")),
    }
}

pub fn evaluate_detector(
    spec: &ModelSpec,
    params: &ParamSet,
    test: &[Sample],
    cfg: &EvalConfig,
) -> Result<EvalReport, ModelError> {
    let ModelSpec::GridDetector { classes, .. } = *spec else {
        return Err(ModelError::TargetMismatch("detector evaluation"));
    };
    let mut preds = Vec::with_capacity(test.len());
    let mut gts = Vec::with_capacity(test.len());
    for s in test {
        let Target::Boxes(b) = &s.target else {
            return Err(ModelError::TargetMismatch("grid_detector"));
        };
        preds.push(predict(spec, params, &s.input, cfg)?);
        gts.push(b.clone());
    }
    Ok(evaluate_predictions(&preds, &gts, classes, cfg))
}

/// Fraction of samples whose arg-max class equals the label.
pub fn accuracy(spec: &ModelSpec, params: &ParamSet, data: &[Sample]) -> Result<f64, ModelError> {
    let mut correct = 0usize;
    for s in data {
        let Target::Class(label) = s.target else {
            return Err(ModelError::TargetMismatch("logistic_classifier"));
        };
        let Output::Probabilities(p) = model::forward(spec, params, &s.input)? else {
            return Err(ModelError::TargetMismatch("logistic_classifier"));
        };
        let argmax = p
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
            .0;
        correct += usize::from(argmax == label);
    }
    Ok(if data.is_empty() {
        0.0
    } else {
        correct as f64 / data.len() as f64
    })
}

/// Coefficient of determination clipped to `[0, 1]`.
pub fn r_squared(spec: &ModelSpec, params: &ParamSet, data: &[Sample]) -> Result<f64, ModelError> {
    let mut ys = Vec::with_capacity(data.len());
    let mut sse = 0.0;
    for s in data {
        let Target::Value(y) = s.target else {
            return Err(ModelError::TargetMismatch("linear_regressor"));
        };
        let Output::Value(pred) = model::forward(spec, params, &s.input)? else {
            return Err(ModelError::TargetMismatch("linear_regressor"));
        };
        sse += (pred - y as f64).powi(2);
        ys.push(y as f64);
    }
    if ys.is_empty() {
        return Ok(0.0);
    }
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let sst: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    Ok(if sst == 0.0 {
        if sse == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (1.0 - sse / sst).clamp(0.0, 1.0)
    })
}

/// The per-round metric: mAP@0.5 for detectors, accuracy for classifiers,
/// clipped R² for regressors.
pub fn round_metric(spec: &ModelSpec, params: &ParamSet, test: &[Sample], cfg: &EvalConfig) -> Result<f64, ModelError> {
    match spec {
        ModelSpec::GridDetector { .. } => evaluate_detector(spec, params, test, cfg).map(|r| r.map),
        ModelSpec::LogisticClassifier { .. } => accuracy(spec, params, test),
        ModelSpec::LinearRegressor { .. } => r_squared(spec, params, test),
    }
}
