//! Detection metrics: IoU, greedy matching, all-point AP / mAP@0.5,
//! confidence-binned D-ECE with reliability tables, and temperature scaling.

mod render;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::datasets::{BoxLabel, DatasetSample};
use crate::detector::Detection;
use crate::error::{Error, Result};

pub use render::render_reliability_png;

pub const DEFAULT_IOU: f64 = 0.5;
pub const DEFAULT_BINS: usize = 10;
/// Detections below this score are left out of D-ECE.
pub const DECE_SCORE_FLOOR: f64 = 0.3;
pub const TEMPERATURE_RANGE: (f64, f64) = (0.05, 20.0);

/// Ground truth keyed by image id.
pub type GroundTruth = BTreeMap<String, Vec<BoxLabel>>;

pub fn ground_truth(samples: &[DatasetSample]) -> GroundTruth {
    samples.iter().map(|s| (s.image_id.clone(), s.labels.clone())).collect()
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        if !bx.is_valid() {
            return Err(Error::DegenerateBox(bx.to_array()));
        }
    }
    Ok(a.iou(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Per input detection, in input order.
    pub tp: Vec<bool>,
    /// Index into the image's ground-truth list for true positives.
    pub matched_gt: Vec<Option<usize>>,
    pub unmatched_gt: BTreeMap<String, usize>,
}

impl MatchResult {
    pub fn num_tp(&self) -> usize {
        self.tp.iter().filter(|&&t| t).count()
    }
}

/// Detection indices in descending score order, ties by input index.
fn by_score(dets: &[&Detection], idx: &[usize]) -> Vec<usize> {
    let mut order = idx.to_vec();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy matching per image and class: in descending score order each
/// detection claims the highest-IoU unmatched ground truth of its class with
/// IoU at least `iou_thresh`; otherwise it is a false positive.
pub fn match_detections(dets: &[Detection], gts: &GroundTruth, iou_thresh: f64) -> MatchResult {
    let refs: Vec<&Detection> = dets.iter().collect();
    let mut tp = vec![false; dets.len()];
    let mut matched_gt = vec![None; dets.len()];
    let mut by_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        by_image.entry(d.image_id.as_str()).or_default().push(i);
    }
    let mut unmatched_gt = BTreeMap::new();
    for (image_id, labels) in gts {
        let mut taken = vec![false; labels.len()];
        if let Some(idx) = by_image.get(image_id.as_str()) {
            for i in by_score(&refs, idx) {
                let d = &dets[i];
                let b = d.bbox();
                let mut best: Option<(f64, usize)> = None;
                for (g, l) in labels.iter().enumerate() {
                    if taken[g] || l.class_id != d.class_id {
                        continue;
                    }
                    let o = b.iou(&l.bbox);
                    if o >= iou_thresh && best.is_none_or(|(bo, _)| o > bo) {
                        best = Some((o, g));
                    }
                }
                if let Some((_, g)) = best {
                    taken[g] = true;
                    tp[i] = true;
                    matched_gt[i] = Some(g);
                }
            }
        }
        unmatched_gt.insert(image_id.clone(), taken.iter().filter(|&&t| !t).count());
    }
    MatchResult { tp, matched_gt, unmatched_gt }
}

/// All-point interpolated AP from `(score, is_tp)` pairs. Zero when there is
/// no ground truth.
pub fn average_precision(scored: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0).then(a.cmp(&b)));
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &i in &order {
        if scored[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub domain_name: String,
    /// AP per foreground class `1..=K`; absent classes hold 0.
    pub per_class_ap: Vec<f64>,
    /// Whether the class occurs in the ground truth.
    pub present: Vec<bool>,
    /// Unweighted mean over present classes.
    pub map: f64,
    pub num_detections: usize,
    pub num_gt: usize,
}

pub fn evaluate(dets: &[Detection], gts: &GroundTruth, num_classes: usize, iou_thresh: f64, domain: &str) -> EvalReport {
    let m = match_detections(dets, gts, iou_thresh);
    evaluate_matched(dets, &m, gts, num_classes, domain)
}

pub fn evaluate_matched(
    dets: &[Detection],
    m: &MatchResult,
    gts: &GroundTruth,
    num_classes: usize,
    domain: &str,
) -> EvalReport {
    let mut per_class_ap = vec![0.0; num_classes];
    let mut present = vec![false; num_classes];
    for c in 1..=num_classes as u32 {
        let n_gt = gts.values().flatten().filter(|l| l.class_id == c).count();
        let scored: Vec<(f64, bool)> = dets
            .iter()
            .zip(&m.tp)
            .filter(|(d, _)| d.class_id == c)
            .map(|(d, &t)| (d.score, t))
            .collect();
        present[c as usize - 1] = n_gt > 0;
        per_class_ap[c as usize - 1] = average_precision(&scored, n_gt);
    }
    let n_present = present.iter().filter(|&&p| p).count();
    let map = if n_present == 0 {
        0.0
    } else {
        per_class_ap.iter().zip(&present).filter(|(_, &p)| p).map(|(a, _)| a).sum::<f64>() / n_present as f64
    };
    EvalReport {
        domain_name: domain.to_string(),
        per_class_ap,
        present,
        map,
        num_detections: dets.len(),
        num_gt: gts.values().map(Vec::len).sum(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub mean_confidence: f64,
    /// Fraction of true positives; 0 for empty bins.
    pub precision: f64,
    pub count: usize,
    pub empty: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    pub dece: f64,
    pub n_bins: usize,
    pub score_floor: f64,
    pub total: usize,
}

fn bin_index(score: f64, n_bins: usize) -> usize {
    ((score * n_bins as f64).floor() as usize).min(n_bins - 1)
}

/// D-ECE over `(confidence, is_tp)` pairs already filtered by the caller.
pub fn dece_from_pairs(pairs: &[(f64, bool)], n_bins: usize, score_floor: f64) -> Result<CalibrationReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyDetections);
    }
    if n_bins == 0 {
        return Err(Error::Config("n_bins must be positive".into()));
    }
    let mut conf = vec![0.0; n_bins];
    let mut hits = vec![0usize; n_bins];
    let mut count = vec![0usize; n_bins];
    for &(s, tp) in pairs {
        let b = bin_index(s, n_bins);
        conf[b] += s;
        count[b] += 1;
        hits[b] += tp as usize;
    }
    let n = pairs.len() as f64;
    let mut dece = 0.0;
    let bins = (0..n_bins)
        .map(|b| {
            let empty = count[b] == 0;
            let (mc, prec) = if empty {
                (0.0, 0.0)
            } else {
                (conf[b] / count[b] as f64, hits[b] as f64 / count[b] as f64)
            };
            dece += count[b] as f64 / n * (prec - mc).abs();
            CalibrationBin {
                lo: b as f64 / n_bins as f64,
                hi: (b + 1) as f64 / n_bins as f64,
                mean_confidence: mc,
                precision: prec,
                count: count[b],
                empty,
            }
        })
        .collect();
    Ok(CalibrationReport { bins, dece, n_bins, score_floor, total: pairs.len() })
}

/// D-ECE of detections with score at least `score_floor`, using the
/// true-positive flags from `matches`.
pub fn compute_dece(dets: &[Detection], matches: &MatchResult, n_bins: usize, score_floor: f64) -> Result<CalibrationReport> {
    let pairs: Vec<(f64, bool)> = dets
        .iter()
        .zip(&matches.tp)
        .filter(|(d, _)| d.score >= score_floor)
        .map(|(d, &t)| (d.score, t))
        .collect();
    dece_from_pairs(&pairs, n_bins, score_floor)
}

pub fn reliability_csv(report: &CalibrationReport) -> String {
    let mut out = String::from("bin_lo,bin_hi,mean_confidence,precision,count,empty\n");
    for b in &report.bins {
        let _ = writeln!(
            out,
            "{:.4},{:.4},{:.6},{:.6},{},{}",
            b.lo, b.hi, b.mean_confidence, b.precision, b.count, b.empty
        );
    }
    out
}

/// Writes `<stem>.csv` and `<stem>.png` into `dir`.
pub fn reliability_table(report: &CalibrationReport, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv, reliability_csv(report)).map_err(|e| Error::io(&csv, e))?;
    render_reliability_png(report, &dir.join(format!("{stem}.png")))
}

/// Temperature-scaled distribution `p^(1/T) / Σ p^(1/T)`, which equals a
/// softmax of the logits divided by `T`.
pub fn scale_probs(probs: &[f64], t: f64) -> Vec<f64> {
    let logs: Vec<f64> = probs.iter().map(|p| p.max(1e-300).ln() / t).collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn max_foreground(p: &[f64]) -> f64 {
    p.iter().skip(1).cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Rescales every detection's distribution and score. The predicted class
/// is unchanged because the transform is monotone within a row.
pub fn apply_temperature(dets: &[Detection], t: f64) -> Vec<Detection> {
    dets.iter()
        .map(|d| {
            let full_probs = scale_probs(&d.full_probs, t);
            Detection { score: full_probs[d.class_id as usize], full_probs, ..d.clone() }
        })
        .collect()
}

/// Fits `T` minimising D-ECE of the temperature-scaled confidences of the
/// detections that pass the score floor at `T = 1`. A coarse log-spaced grid
/// brackets the minimum, then golden-section search refines it in `ln T`.
pub fn fit_temperature(dets: &[Detection], matches: &MatchResult, n_bins: usize, score_floor: f64) -> Result<f64> {
    let kept: Vec<(&Detection, bool)> = dets
        .iter()
        .zip(&matches.tp)
        .filter(|(d, _)| d.score >= score_floor)
        .map(|(d, &t)| (d, t))
        .collect();
    if kept.is_empty() {
        return Err(Error::NoDetections);
    }
    let objective = |log_t: f64| -> f64 {
        let t = log_t.exp();
        let pairs: Vec<(f64, bool)> = kept
            .iter()
            .map(|(d, tp)| (max_foreground(&scale_probs(&d.full_probs, t)), *tp))
            .collect();
        dece_from_pairs(&pairs, n_bins, score_floor).map(|r| r.dece).unwrap_or(f64::INFINITY)
    };
    let (lo, hi) = (TEMPERATURE_RANGE.0.ln(), TEMPERATURE_RANGE.1.ln());
    let grid = 48;
    let step = (hi - lo) / grid as f64;
    let values: Vec<f64> = (0..=grid).map(|i| objective(lo + step * i as f64)).collect();
    // The range is symmetric in ln T, so the middle grid point is T = 1;
    // ties go to the point closest to it.
    let dist = |i: usize| i.abs_diff(grid / 2);
    let best = (0..=grid)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]).then(dist(a).cmp(&dist(b))))
        .expect("non-empty grid");
    let (mut a, mut b) = (lo + step * best.saturating_sub(1) as f64, lo + step * (best + 1).min(grid) as f64);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut c, mut d) = (b - inv_phi * (b - a), a + inv_phi * (b - a));
    let (mut fc, mut fd) = (objective(c), objective(d));
    for _ in 0..60 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = objective(d);
        }
    }
    let refined = 0.5 * (a + b);
    let log_t = if objective(refined) <= values[best] { refined } else { lo + step * best as f64 };
    Ok(log_t.exp())
}
