//! Decision math between raw model outputs and pipeline actions.
//!
//! Every score gate in this module is strict: a value passes only when it is
//! greater than its threshold, so a score sitting exactly on the threshold is
//! dropped (detections) or sent to review (classifications).

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::AppConfig;

const PROB_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum GatingError {
    #[error("degenerate bbox ({x1}, {y1}, {x2}, {y2})")]
    DegenerateBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("non-finite value in input")]
    NonFinite,
    #[error("empty input vector")]
    Empty,
    #[error("vector length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("not a probability vector: {0}")]
    NotProbabilities(String),
}

/// Axis-aligned box in pixel coordinates with `x1 < x2` and `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    /// Builds a box, swapping coordinates into min/max order when needed.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<BBox, GatingError> {
        BBox::normalized(x1, y1, x2, y2).map(|(b, _)| b)
    }

    /// Like [`BBox::new`], also reporting whether any pair had to be swapped.
    pub fn normalized(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<(BBox, bool), GatingError> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(GatingError::NonFinite);
        }
        if x1 == x2 || y1 == y2 {
            return Err(GatingError::DegenerateBox { x1, y1, x2, y2 });
        }
        let swapped = x1 > x2 || y1 > y2;
        Ok((
            BBox {
                x1: x1.min(x2),
                y1: y1.min(y2),
                x2: x1.max(x2),
                y2: y1.max(y2),
            },
            swapped,
        ))
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Clamps the box to `[0, w] x [0, h]`. Returns `None` when nothing is left.
    pub fn clamp_to(&self, w: f64, h: f64) -> Option<(BBox, bool)> {
        let c = BBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        };
        if c.x1 >= c.x2 || c.y1 >= c.y2 {
            return None;
        }
        Some((c, c != *self))
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GatingError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: u32,
    /// Set when backend validation had to reorder or clamp the box.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub normalized: bool,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64, class_id: u32) -> Detection {
        Detection {
            bbox,
            score,
            class_id,
            normalized: false,
        }
    }
}

/// Probabilities aligned with the configured species labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<ProbVector, GatingError> {
        if probs.is_empty() {
            return Err(GatingError::Empty);
        }
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(GatingError::NonFinite);
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(GatingError::NotProbabilities(format!("entry {p} outside [0, 1]")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(GatingError::NotProbabilities(format!("sum is {sum}")));
        }
        Ok(ProbVector(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    /// The `k` most probable classes, by probability descending then index ascending.
    pub fn topk(&self, k: usize) -> Vec<(usize, f64)> {
        let mut ranked: Vec<(usize, f64)> = self.0.iter().copied().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k.min(self.0.len()));
        ranked
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = GatingError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        ProbVector::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    AutoLog,
    Review,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyDecision {
    pub kind: DecisionKind,
    pub species_index: usize,
    pub confidence: f64,
    pub topk: Vec<(usize, f64)>,
}

/// Intersection over union. Disjoint boxes give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

fn by_score_desc(a: &Detection, b: &Detection) -> Ordering {
    b.score.total_cmp(&a.score)
}

/// Greedy non-maximum suppression.
///
/// Detections are visited by descending score (equal scores keep input order);
/// each one is kept unless its IoU with an already kept box exceeds `iou_thr`.
pub fn suppress(dets: &[Detection], iou_thr: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| by_score_desc(a, b));
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_thr) {
            kept.push(d.clone());
        }
    }
    kept
}

/// Class gate, score gate, suppression, then the frame-area gate.
pub fn filter_detections(
    dets: &[Detection],
    frame_w: u32,
    frame_h: u32,
    cfg: &AppConfig,
) -> Vec<Detection> {
    let candidates: Vec<Detection> = dets
        .iter()
        .filter(|d| d.class_id == cfg.bird_class_id)
        .filter(|d| d.score > cfg.det_score_threshold)
        .cloned()
        .collect();
    let min_area = cfg.area_fraction_threshold * f64::from(frame_w) * f64::from(frame_h);
    suppress(&candidates, cfg.iou_threshold)
        .into_iter()
        .filter(|d| d.bbox.area() > min_area)
        .collect()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Result<ProbVector, GatingError> {
    if logits.is_empty() {
        return Err(GatingError::Empty);
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(GatingError::NonFinite);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    ProbVector::new(exps.into_iter().map(|e| e / sum).collect())
}

/// Elementwise mean of the augmented runs, renormalized to sum to 1.
pub fn tta_average(runs: &[ProbVector]) -> Result<ProbVector, GatingError> {
    let first = runs.first().ok_or(GatingError::Empty)?;
    if runs.len() == 1 {
        return Ok(first.clone());
    }
    let n = first.len();
    let mut acc = vec![0.0; n];
    for run in runs {
        if run.len() != n {
            return Err(GatingError::LengthMismatch {
                expected: n,
                actual: run.len(),
            });
        }
        for (a, p) in acc.iter_mut().zip(run.as_slice()) {
            *a += p;
        }
    }
    let count = runs.len() as f64;
    acc.iter_mut().for_each(|a| *a /= count);
    let sum: f64 = acc.iter().sum();
    ProbVector::new(acc.into_iter().map(|a| a / sum).collect())
}

/// Splits a classification into auto-log or review.
pub fn classify_gate(probs: &ProbVector, cfg: &AppConfig, k: usize) -> ClassifyDecision {
    let species_index = probs.argmax();
    let confidence = probs.as_slice()[species_index];
    let kind = if confidence > cfg.cls_confidence_threshold {
        DecisionKind::AutoLog
    } else {
        DecisionKind::Review
    };
    ClassifyDecision {
        kind,
        species_index,
        confidence,
        topk: probs.topk(k.max(1)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(b: BBox, score: f64) -> Detection {
        Detection::new(b, score, COCO_BIRD)
    }

    const COCO_BIRD: u32 = 14;

    #[test]
    fn bbox_reorders_and_rejects_zero_extent() {
        let (b, swapped) = BBox::normalized(10.0, 0.0, 0.0, 5.0).unwrap();
        assert!(swapped);
        assert_eq!(<[f64; 4]>::from(b), [0.0, 0.0, 10.0, 5.0]);
        assert!(matches!(BBox::new(1.0, 1.0, 1.0, 4.0), Err(GatingError::DegenerateBox { .. })));
        assert_eq!(BBox::new(f64::NAN, 0.0, 1.0, 1.0), Err(GatingError::NonFinite));
    }

    #[test]
    fn iou_cases() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(20.0, 20.0, 30.0, 30.0)), 0.0);
        // touching edges share no area
        assert_eq!(iou(&a, &bx(10.0, 0.0, 20.0, 10.0)), 0.0);
        let b = bx(5.0, 5.0, 15.0, 15.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn suppress_cases() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let out = suppress(&[det(a, 0.8), det(a, 0.9)], 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);

        let out = suppress(&[det(a, 0.8), det(bx(50.0, 50.0, 60.0, 60.0), 0.9)], 0.5);
        assert_eq!(out.len(), 2);
        assert!(out[0].score > out[1].score);

        assert!(suppress(&[], 0.5).is_empty());
    }

    /// Keep-set characterization of greedy NMS: a detection is kept iff no
    /// higher-ranked kept detection overlaps it beyond the threshold. Found by
    /// enumerating every subset.
    fn exhaustive_greedy(dets: &[Detection], thr: f64) -> Vec<Detection> {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
        let n = dets.len();
        let mut found = None;
        for mask in 0u32..(1 << n) {
            let ok = (0..n).all(|r| {
                let i = order[r];
                let blocked = (0..r)
                    .map(|q| order[q])
                    .any(|j| mask & (1 << j) != 0 && iou(&dets[i].bbox, &dets[j].bbox) > thr);
                (mask & (1 << i) != 0) == !blocked
            });
            if ok {
                assert!(found.is_none(), "keep-set must be unique");
                found = Some(mask);
            }
        }
        let mask = found.unwrap();
        order.into_iter().filter(|i| mask & (1 << i) != 0).map(|i| dets[i].clone()).collect()
    }

    #[test]
    fn suppress_chain_keeps_ends() {
        // A overlaps B and B overlaps C above threshold while A and C only touch.
        // Two boxes can both exceed IoU 0.5 against B only if they intersect
        // each other, so the chain is built at a threshold where it exists.
        let a = det(bx(0.0, 0.0, 10.0, 1.0), 0.9);
        let b = det(bx(5.0, 0.0, 15.0, 1.0), 0.8);
        let c = det(bx(10.0, 0.0, 20.0, 1.0), 0.7);
        let thr = 0.3;
        assert!(iou(&a.bbox, &b.bbox) > thr && iou(&b.bbox, &c.bbox) > thr);
        assert_eq!(iou(&a.bbox, &c.bbox), 0.0);
        let dets = [c.clone(), a.clone(), b];
        let out = suppress(&dets, thr);
        assert_eq!(out, vec![a, c]);
        assert_eq!(out, exhaustive_greedy(&dets, thr));
    }

    #[test]
    fn area_gate_uses_frame_fraction() {
        let cfg = AppConfig::default();
        let big = det(bx(100.0, 100.0, 700.0, 500.0), 0.95);
        let small = det(bx(100.0, 100.0, 300.0, 300.0), 0.95);
        assert_eq!(filter_detections(std::slice::from_ref(&big), 2560, 1920, &cfg), vec![big]);
        assert!(filter_detections(&[small], 2560, 1920, &cfg).is_empty());
    }

    #[test]
    fn class_and_score_gates() {
        let cfg = AppConfig::default();
        let b = bx(0.0, 0.0, 1000.0, 1000.0);
        let non_bird = Detection::new(b, 0.99, 1);
        assert!(filter_detections(&[non_bird], 2560, 1920, &cfg).is_empty());
        let boundary = det(b, 0.7);
        assert!(filter_detections(&[boundary], 2560, 1920, &cfg).is_empty());
        let above = det(b, 0.7000001);
        assert_eq!(filter_detections(&[above], 2560, 1920, &cfg).len(), 1);
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&[3.0; 4]).unwrap();
        assert!(p.as_slice().iter().all(|v| (v - 0.25).abs() < 1e-15));
        let p = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((p.as_slice()[0] - 0.25).abs() < 1e-15);
        assert!((p.as_slice()[1] - 0.75).abs() < 1e-15);
        assert_eq!(softmax(&[f64::NAN, 1.0]), Err(GatingError::NonFinite));
        assert_eq!(softmax(&[]), Err(GatingError::Empty));
        // large logits do not overflow
        let p = softmax(&[1000.0, 1000.0]).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn tta_cases() {
        let a = ProbVector::new(vec![0.2, 0.8]).unwrap();
        assert_eq!(tta_average(std::slice::from_ref(&a)).unwrap(), a);
        let x = ProbVector::new(vec![1.0, 0.0, 0.0]).unwrap();
        let y = ProbVector::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(tta_average(&[x, y]).unwrap().as_slice(), &[0.5, 0.5, 0.0]);
        let z = ProbVector::new(vec![1.0]).unwrap();
        assert!(matches!(
            tta_average(&[a, z]),
            Err(GatingError::LengthMismatch { expected: 2, actual: 1 })
        ));
        assert_eq!(tta_average(&[]), Err(GatingError::Empty));
    }

    #[test]
    fn gate_boundaries() {
        let cfg = AppConfig::default();
        let p = ProbVector::new(vec![0.71, 0.29]).unwrap();
        assert_eq!(classify_gate(&p, &cfg, 2).kind, DecisionKind::AutoLog);
        let p = ProbVector::new(vec![0.3, 0.7]).unwrap();
        let d = classify_gate(&p, &cfg, 2);
        assert_eq!(d.kind, DecisionKind::Review);
        assert_eq!(d.species_index, 1);
        assert_eq!(d.topk, vec![(1, 0.7), (0, 0.3)]);
        let p = ProbVector::new(vec![0.025; 40]).unwrap();
        let d = classify_gate(&p, &cfg, 3);
        assert_eq!(d.kind, DecisionKind::Review);
        assert_eq!(d.species_index, 0);
        assert_eq!(d.topk.iter().map(|t| t.0).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.5, 0.4]).is_err());
        assert!(ProbVector::new(vec![1.5, -0.5]).is_err());
        assert!(ProbVector::new(vec![]).is_err());
        let p: ProbVector = serde_json::from_str("[0.5,0.5]").unwrap();
        assert_eq!(p.len(), 2);
        assert!(serde_json::from_str::<ProbVector>("[0.5,0.6]").is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0f64..100.0, 0.0f64..100.0, 0.5f64..60.0, 0.5f64..60.0)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn suppress_output_is_pairwise_separated(
            boxes in proptest::collection::vec((arb_box(), 0.0f64..1.0), 0..12),
            thr in 0.1f64..0.9,
        ) {
            let dets: Vec<Detection> = boxes.into_iter().map(|(b, s)| det(b, s)).collect();
            let out = suppress(&dets, thr);
            for (i, a) in out.iter().enumerate() {
                prop_assert!(dets.contains(a));
                for b in &out[i + 1..] {
                    prop_assert!(iou(&a.bbox, &b.bbox) <= thr);
                    prop_assert!(a.score >= b.score);
                }
            }
        }

        #[test]
        fn softmax_preserves_argmax(logits in proptest::collection::vec(-50.0f64..50.0, 1..60)) {
            let p = softmax(&logits).unwrap();
            let sum: f64 = p.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert_eq!(p.argmax(), argmax(&logits));
        }

        #[test]
        fn gate_is_a_single_step_in_threshold(
            raw in proptest::collection::vec(0.0f64..1.0, 2..10),
            thr in 0.0f64..1.0,
        ) {
            let sum: f64 = raw.iter().sum::<f64>() + 1e-3;
            let mut v: Vec<f64> = raw.iter().map(|x| (x + 1e-3 / raw.len() as f64) / sum).collect();
            let total: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= total);
            let p = ProbVector::new(v).unwrap();
            let cfg = AppConfig { cls_confidence_threshold: thr, ..AppConfig::default() };
            let d = classify_gate(&p, &cfg, 3);
            let max = p.as_slice()[p.argmax()];
            prop_assert_eq!(d.kind == DecisionKind::AutoLog, max > thr);
        }
    }
}
