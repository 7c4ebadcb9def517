//! Center-distance detection metrics: per-class AP over several match
//! thresholds, true-positive errors, a composite score and near/far
//! bucketing.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::detectors::Detection;
use crate::synthworld::{canonical_yaw, BoxLabel};

/// Version of the JSON metrics report layout.
pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Normalizer of the translation error inside the composite score (m).
pub const ATE_NORM: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Center-distance match thresholds (m).
    pub thresholds: Vec<f64>,
    /// Threshold whose matches define the true-positive errors.
    pub tp_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { thresholds: vec![0.5, 1.0, 2.0, 4.0], tp_threshold: 2.0 }
    }
}

fn center_distance(a: &BoxLabel, b: &BoxLabel) -> f64 {
    (a.x as f64 - b.x as f64).hypot(a.y as f64 - b.y as f64)
}

/// Errors of one true positive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TpError {
    pub translation: f64,
    pub scale: f64,
    pub orientation: f64,
}

impl TpError {
    pub fn between(pred: &BoxLabel, gt: &BoxLabel) -> Self {
        let translation = center_distance(pred, gt);
        let ratio = |a: f32, b: f32| (a.min(b) as f64) / (a.max(b) as f64);
        let scale = 1.0 - ratio(pred.w, gt.w) * ratio(pred.l, gt.l);
        let orientation = canonical_yaw(pred.yaw as f64 - gt.yaw as f64).abs();
        Self { translation, scale, orientation }
    }
}

/// One prediction after matching at one threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchedDetection {
    pub score: f64,
    /// Position in the flattened input, used to order equal scores.
    pub id: usize,
    pub tp: bool,
    /// Distance from the sensor of the GT matched at the TP threshold, or of
    /// the prediction itself when unmatched there.
    pub distance: f64,
    pub error: Option<TpError>,
}

/// Matches of one class at one threshold, in descending score order.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMatch {
    pub class_id: usize,
    pub threshold: f64,
    pub detections: Vec<MatchedDetection>,
    pub gt_distances: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub num_classes: usize,
    pub config: EvalConfig,
    /// Indexed by `class * thresholds.len() + threshold`.
    pub entries: Vec<ClassMatch>,
}

/// Greedy matching in descending score order (ties by input position):
/// each prediction takes the nearest still-unmatched GT of its class in the
/// same scene within the threshold.
pub fn match_detections(scenes: &[(Vec<Detection>, Vec<BoxLabel>)], num_classes: usize, config: &EvalConfig) -> MatchResult {
    let mut entries = Vec::new();
    for class in 0..num_classes {
        let mut order: Vec<(usize, usize, &Detection)> = Vec::new();
        let mut id = 0;
        for (s, (preds, _)) in scenes.iter().enumerate() {
            for p in preds {
                if p.label.class_id as usize == class {
                    order.push((id, s, p));
                }
                id += 1;
            }
        }
        order.sort_by(|a, b| b.2.score.total_cmp(&a.2.score).then(a.0.cmp(&b.0)));
        let gts: Vec<Vec<&BoxLabel>> = scenes
            .iter()
            .map(|(_, g)| g.iter().filter(|b| b.class_id as usize == class).collect())
            .collect();
        let gt_distances: Vec<f64> = gts.iter().flatten().map(|b| b.distance()).collect();
        for &threshold in &config.thresholds {
            let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
            let detections = order
                .iter()
                .map(|&(id, s, p)| {
                    let mut best: Option<(usize, f64)> = None;
                    for (j, g) in gts[s].iter().enumerate() {
                        if taken[s][j] {
                            continue;
                        }
                        let d = center_distance(&p.label, g);
                        if d <= threshold && best.map_or(true, |(_, bd)| d < bd) {
                            best = Some((j, d));
                        }
                    }
                    match best {
                        Some((j, _)) => {
                            taken[s][j] = true;
                            MatchedDetection {
                                score: p.score,
                                id,
                                tp: true,
                                distance: gts[s][j].distance(),
                                error: Some(TpError::between(&p.label, gts[s][j])),
                            }
                        }
                        None => MatchedDetection { score: p.score, id, tp: false, distance: p.label.distance(), error: None },
                    }
                })
                .collect();
            entries.push(ClassMatch { class_id: class, threshold, detections, gt_distances: gt_distances.clone() });
        }
        // Bucket distances follow the match at the TP threshold so that a
        // prediction lands in the same bucket at every threshold.
        let nt = config.thresholds.len();
        if let Some(ti) = config.thresholds.iter().position(|&t| (t - config.tp_threshold).abs() < 1e-12) {
            let first = entries.len() - nt;
            let by_id: Vec<(usize, f64)> = entries[first + ti].detections.iter().map(|d| (d.id, d.distance)).collect();
            for e in &mut entries[first..] {
                for (d, &(id, dist)) in e.detections.iter_mut().zip(&by_id) {
                    debug_assert_eq!(d.id, id);
                    d.distance = dist;
                }
            }
        }
    }
    MatchResult { num_classes, config: config.clone(), entries }
}

/// 41-point interpolated average precision over recall levels 0, 0.025, .., 1.
pub fn average_precision(tp_flags: &[bool], num_gt: usize) -> f64 {
    assert!(num_gt > 0, "AP is undefined without ground truth");
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &flag) in tp_flags.iter().enumerate() {
        tp += flag as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // Running max from the right: best precision at recall >= r.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=40 {
        let r = k as f64 / 40.0;
        if let Some(i) = recall.iter().position(|&x| x >= r - 1e-12) {
            sum += precision[i];
        }
    }
    sum / 41.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mATE")]
    pub mate: f64,
    #[serde(rename = "mASE")]
    pub mase: f64,
    #[serde(rename = "mAOE")]
    pub maoe: f64,
    #[serde(rename = "NDS*")]
    pub nds: f64,
    pub num_gt: usize,
    pub num_pred: usize,
}

/// `(5 mAP + sum over errors of (1 - min(1, e / norm))) / 8`.
pub fn composite_score(map: f64, mate: f64, mase: f64, maoe: f64) -> f64 {
    let term = |e: f64| 1.0 - e.min(1.0);
    (5.0 * map + term(mate / ATE_NORM) + term(mase) + term(maoe / PI)) / 8.0
}

/// Metrics over all detections and GTs.
pub fn summarize(result: &MatchResult) -> Metrics {
    summarize_where(result, |_| true)
}

/// Metrics restricted to objects whose distance satisfies `keep`: GTs by
/// their own distance, matched predictions by their GT's distance,
/// unmatched predictions by their own.
pub fn summarize_where(result: &MatchResult, keep: impl Fn(f64) -> bool) -> Metrics {
    let nt = result.config.thresholds.len();
    let tp_index = result
        .config
        .thresholds
        .iter()
        .position(|&t| (t - result.config.tp_threshold).abs() < 1e-12)
        .expect("tp threshold is one of the match thresholds");
    let mut aps = Vec::new();
    let (mut ate, mut ase, mut aoe) = (Vec::new(), Vec::new(), Vec::new());
    let (mut num_gt, mut num_pred) = (0, 0);
    for class in 0..result.num_classes {
        let first = &result.entries[class * nt];
        let gt = first.gt_distances.iter().filter(|&&d| keep(d)).count();
        let preds = first.detections.iter().filter(|d| keep(d.distance)).count();
        num_gt += gt;
        num_pred += preds;
        if gt == 0 {
            continue;
        }
        let mut class_ap = 0.0;
        for t in 0..nt {
            let flags: Vec<bool> =
                result.entries[class * nt + t].detections.iter().filter(|d| keep(d.distance)).map(|d| d.tp).collect();
            class_ap += average_precision(&flags, gt);
        }
        aps.push(class_ap / nt as f64);
        let errs: Vec<TpError> = result.entries[class * nt + tp_index]
            .detections
            .iter()
            .filter(|d| keep(d.distance))
            .filter_map(|d| d.error)
            .collect();
        if errs.is_empty() {
            ate.push(ATE_NORM);
            ase.push(1.0);
            aoe.push(PI);
        } else {
            let k = errs.len() as f64;
            ate.push(errs.iter().map(|e| e.translation).sum::<f64>() / k);
            ase.push(errs.iter().map(|e| e.scale).sum::<f64>() / k);
            aoe.push(errs.iter().map(|e| e.orientation).sum::<f64>() / k);
        }
    }
    let mean = |v: &[f64], empty: f64| if v.is_empty() { empty } else { v.iter().sum::<f64>() / v.len() as f64 };
    // With no ground truth at all, only an empty prediction set is correct.
    let map = if aps.is_empty() { if num_pred == 0 { 1.0 } else { 0.0 } } else { mean(&aps, 0.0) };
    let (mate, mase, maoe) = if aps.is_empty() && num_pred == 0 {
        (0.0, 0.0, 0.0)
    } else {
        (mean(&ate, ATE_NORM), mean(&ase, 1.0), mean(&aoe, PI))
    };
    Metrics { map, mate, mase, maoe, nds: composite_score(map, mate, mase, maoe), num_gt, num_pred }
}

/// Near/far metrics split at `split` meters from the sensor.
pub fn bucket_by_distance(result: &MatchResult, split: f64) -> (Metrics, Metrics) {
    (summarize_where(result, |d| d < split), summarize_where(result, |d| d >= split))
}

/// Convenience: match and summarize in one call.
pub fn evaluate(scenes: &[(Vec<Detection>, Vec<BoxLabel>)], num_classes: usize, config: &EvalConfig) -> Metrics {
    summarize(&match_detections(scenes, num_classes, config))
}
