//! Offline metrics over labeled prediction manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gating::{iou, BBox, Detection};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("class index {index} out of range for {n} classes")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("no predictions")]
    Empty,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// One classification with ground truth. `topk` is sorted by descending probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPrediction {
    pub true_index: usize,
    pub topk: Vec<(usize, f64)>,
}

impl LabeledPrediction {
    pub fn top1(&self) -> usize {
        self.topk[0].0
    }
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfusionMatrix {
    pub n: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(n: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            n,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }
}

pub fn confusion_matrix(preds: &[LabeledPrediction], n: usize) -> Result<ConfusionMatrix, EvalError> {
    let mut m = ConfusionMatrix::zeros(n);
    for p in preds {
        let top = p.topk.first().ok_or(EvalError::Empty)?.0;
        for index in [p.true_index, top] {
            if index >= n {
                return Err(EvalError::IndexOutOfRange { index, n });
            }
        }
        m.counts[p.true_index][top] += 1;
    }
    Ok(m)
}

pub fn accuracy(m: &ConfusionMatrix) -> Result<f64, EvalError> {
    match m.total() {
        0 => Err(EvalError::Empty),
        t => Ok(m.trace() as f64 / t as f64),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassRates {
    pub label: String,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrecisionRecall {
    pub per_class: Vec<ClassRates>,
    pub macro_precision: Option<f64>,
    pub macro_recall: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn mean(vals: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = vals.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-class rates; a class with a zero denominator has that rate absent and
/// is left out of the macro mean.
pub fn precision_recall(m: &ConfusionMatrix, labels: &[String]) -> PrecisionRecall {
    let per_class: Vec<ClassRates> = (0..m.n)
        .map(|c| ClassRates {
            label: labels.get(c).cloned().unwrap_or_else(|| c.to_string()),
            precision: ratio(m.counts[c][c], m.col_sum(c)),
            recall: ratio(m.counts[c][c], m.row_sum(c)),
            support: m.row_sum(c),
        })
        .collect();
    PrecisionRecall {
        macro_precision: mean(per_class.iter().filter_map(|c| c.precision)),
        macro_recall: mean(per_class.iter().filter_map(|c| c.recall)),
        per_class,
    }
}

/// Share of predictions whose true class is among the first `min(k, len)` entries.
pub fn topk_accuracy(preds: &[LabeledPrediction], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = preds
        .iter()
        .filter(|p| p.topk.iter().take(k).any(|&(i, _)| i == p.true_index))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Greedy matching in descending score order; each prediction takes the free
/// truth of highest IoU when that IoU exceeds `iou_thr`.
pub fn match_detections(preds: &[Detection], truths: &[BBox], iou_thr: f64) -> MatchCounts {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    let mut taken = vec![false; truths.len()];
    let mut tp = 0;
    for i in order {
        let best = truths
            .iter()
            .enumerate()
            .filter(|(j, _)| !taken[*j])
            .map(|(j, t)| (j, iou(&preds[i].bbox, t)))
            .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((j, v)),
            });
        if let Some((j, v)) = best {
            if v > iou_thr {
                taken[j] = true;
                tp += 1;
            }
        }
    }
    MatchCounts {
        tp,
        fp: preds.len() - tp,
        fn_: truths.len() - tp,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
}

/// One frame of the detection manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFrame {
    pub frame: serde_json::Value,
    pub preds: Vec<ScoredBox>,
    pub truths: Vec<BBox>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub predictions: Vec<LabeledPrediction>,
    pub detections: Vec<DetectionFrame>,
}

/// Parses JSONL where each line is a classification or a detection frame.
pub fn parse_manifest(text: &str) -> Result<Manifest, EvalError> {
    let mut out = Manifest::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let err = |message: String| EvalError::Parse { line, message };
        let v: serde_json::Value = serde_json::from_str(raw).map_err(|e| err(e.to_string()))?;
        if v.get("true_index").is_some() {
            let p: LabeledPrediction = serde_json::from_value(v).map_err(|e| err(e.to_string()))?;
            if p.topk.is_empty() {
                return Err(err("topk is empty".into()));
            }
            if p.topk.windows(2).any(|w| w[0].1 < w[1].1) {
                return Err(err("topk is not sorted by descending probability".into()));
            }
            out.predictions.push(p);
        } else if v.get("preds").is_some() {
            let f: DetectionFrame = serde_json::from_value(v).map_err(|e| err(e.to_string()))?;
            out.detections.push(f);
        } else {
            return Err(err("expected `true_index` or `preds`".into()));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionSummary {
    pub frames: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub predictions: usize,
    pub classes: usize,
    pub averaging: &'static str,
    pub top1_accuracy: Option<f64>,
    pub topk_accuracy: BTreeMap<usize, f64>,
    pub per_class: Vec<ClassRates>,
    pub macro_precision: Option<f64>,
    pub macro_recall: Option<f64>,
    pub detection: Option<DetectionSummary>,
}

pub const REPORT_KS: [usize; 3] = [1, 3, 5];

pub fn evaluate(
    manifest: &Manifest,
    labels: &[String],
    iou_thr: f64,
) -> Result<(MetricsReport, ConfusionMatrix), EvalError> {
    let n = labels.len();
    let m = confusion_matrix(&manifest.predictions, n)?;
    let pr = precision_recall(&m, labels);
    let mut topk = BTreeMap::new();
    if !manifest.predictions.is_empty() {
        for k in REPORT_KS {
            topk.insert(k, topk_accuracy(&manifest.predictions, k)?);
        }
    }
    let detection = (!manifest.detections.is_empty()).then(|| {
        let mut total = MatchCounts::default();
        for f in &manifest.detections {
            let dets: Vec<Detection> = f.preds.iter().map(|p| Detection::new(p.bbox, p.score, 0)).collect();
            let c = match_detections(&dets, &f.truths, iou_thr);
            total.tp += c.tp;
            total.fp += c.fp;
            total.fn_ += c.fn_;
        }
        DetectionSummary {
            frames: manifest.detections.len(),
            tp: total.tp,
            fp: total.fp,
            fn_: total.fn_,
            precision: ratio(total.tp as u64, (total.tp + total.fp) as u64),
            recall: ratio(total.tp as u64, (total.tp + total.fn_) as u64),
        }
    });
    if manifest.predictions.is_empty() && detection.is_none() {
        return Err(EvalError::Empty);
    }
    let report = MetricsReport {
        predictions: manifest.predictions.len(),
        classes: n,
        averaging: "macro",
        top1_accuracy: accuracy(&m).ok(),
        topk_accuracy: topk,
        per_class: pr.per_class,
        macro_precision: pr.macro_precision,
        macro_recall: pr.macro_recall,
        detection,
    };
    Ok((report, m))
}

fn fmt_rate(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
}

/// Fixed-format text report.
pub fn render_report(r: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "aviary evaluation report");
    let _ = writeln!(s, "predictions: {}", r.predictions);
    let _ = writeln!(s, "classes: {}", r.classes);
    let _ = writeln!(s, "averaging: macro (classes with undefined rates excluded)");
    let _ = writeln!(s, "top-1 accuracy: {}", fmt_rate(r.top1_accuracy));
    for (k, v) in &r.topk_accuracy {
        if *k != 1 {
            let _ = writeln!(s, "top-{k} accuracy: {v:.6}");
        }
    }
    let _ = writeln!(s, "macro precision: {}", fmt_rate(r.macro_precision));
    let _ = writeln!(s, "macro recall: {}", fmt_rate(r.macro_recall));
    if r.predictions > 0 {
        let _ = writeln!(s, "per-class:");
        let width = r.per_class.iter().map(|c| c.label.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(s, "  {:<width$}  {:>9}  {:>9}  {:>7}", "label", "precision", "recall", "support");
        for c in &r.per_class {
            let _ = writeln!(
                s,
                "  {:<width$}  {:>9}  {:>9}  {:>7}",
                c.label,
                fmt_rate(c.precision),
                fmt_rate(c.recall),
                c.support
            );
        }
    }
    if let Some(d) = &r.detection {
        let _ = writeln!(
            s,
            "detection: frames {} tp {} fp {} fn {} precision {} recall {}",
            d.frames,
            d.tp,
            d.fp,
            d.fn_,
            fmt_rate(d.precision),
            fmt_rate(d.recall)
        );
    }
    s
}

fn csv_cell(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Header row of an empty corner cell plus labels, then one row per true class.
pub fn confusion_csv(m: &ConfusionMatrix, labels: &[String]) -> String {
    let mut s = String::new();
    let header: Vec<String> = std::iter::once(String::new())
        .chain(labels.iter().map(|l| csv_cell(l)))
        .collect();
    s.push_str(&header.join(","));
    s.push('\n');
    for (i, row) in m.counts.iter().enumerate() {
        s.push_str(&csv_cell(&labels[i]));
        for c in row {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
    }
    s
}

/// Writes `metrics.json` and `confusion.csv` into `dir`.
pub fn write_outputs(dir: &Path, r: &MetricsReport, m: &ConfusionMatrix, labels: &[String]) -> Result<(), EvalError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |e: std::io::Error| EvalError::Io {
            path,
            message: e.to_string(),
        }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let metrics = dir.join("metrics.json");
    let json = serde_json::to_string_pretty(r).expect("report serializes");
    std::fs::write(&metrics, json + "\n").map_err(io(&metrics))?;
    let csv = dir.join("confusion.csv");
    std::fs::write(&csv, confusion_csv(m, labels)).map_err(io(&csv))
}
