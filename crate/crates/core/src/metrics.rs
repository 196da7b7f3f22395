//! Temporal IoU, average precision, mAP over IoU thresholds and NMS.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::decoder::Detection;
use crate::error::{Error, Result};

pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    for (s, e) in [a, b] {
        if !(s < e) {
            return Err(Error::InvalidArgument(format!("temporal_iou: degenerate segment [{s}, {e}]")));
        }
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    Ok(inter / ((a.1 - a.0) + (b.1 - b.0) - inter))
}

fn iou_or_zero(a: (f64, f64), b: (f64, f64)) -> f64 {
    temporal_iou(a, b).unwrap_or(0.0)
}

/// A class-labelled, scored segment belonging to one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSegment {
    pub video: usize,
    pub start: f64,
    pub end: f64,
    pub class: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub video: usize,
    pub start: f64,
    pub end: f64,
    pub class: usize,
}

/// Detections sorted by score descending, ties by start ascending.
fn ranked(dets: &[ScoredSegment]) -> Vec<&ScoredSegment> {
    let mut order: Vec<&ScoredSegment> = dets.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.start.total_cmp(&b.start)));
    order
}

/// True-positive flags of `dets` in ranked order under greedy matching.
pub fn greedy_matches(dets: &[ScoredSegment], gts: &[GroundTruth], iou_thr: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    ranked(dets)
        .into_iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || g.video != d.video {
                    continue;
                }
                let iou = iou_or_zero((d.start, d.end), (g.start, g.end));
                if iou >= iou_thr && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point interpolated AP for a single class.
pub fn average_precision(dets: &[ScoredSegment], gts: &[GroundTruth], iou_thr: f64) -> f64 {
    if gts.is_empty() || dets.is_empty() {
        return 0.0;
    }
    let tp = greedy_matches(dets, gts, iou_thr);
    let n_gt = gts.len() as f64;
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / n_gt);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Greedy per-class NMS: survivors pairwise overlap by at most `iou_thr`.
pub fn nms(dets: &[ScoredSegment], iou_thr: f64) -> Vec<ScoredSegment> {
    let mut kept: Vec<ScoredSegment> = Vec::new();
    for d in ranked(dets) {
        let clash = kept.iter().any(|k| {
            k.video == d.video && k.class == d.class && iou_or_zero((k.start, k.end), (d.start, d.end)) > iou_thr
        });
        if !clash {
            kept.push(d.clone());
        }
    }
    kept
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub nms_enabled: bool,
    pub nms_iou: f64,
    pub top_k_per_video: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: vec![0.3, 0.4, 0.5, 0.6, 0.7],
            nms_enabled: false,
            nms_iou: 0.5,
            top_k_per_video: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::Config("eval.iou_thresholds must not be empty".into()));
        }
        if self.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::Config("eval.iou_thresholds must lie in (0, 1)".into()));
        }
        if self.iou_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("eval.iou_thresholds must be strictly increasing".into()));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::Config("eval.nms_iou must lie in (0, 1)".into()));
        }
        if self.top_k_per_video == Some(0) {
            return Err(Error::Config("eval.top_k_per_video must be positive".into()));
        }
        Ok(())
    }
}

/// Expands per-query detections into one scored segment per class.
pub fn flatten_detections(video: usize, dets: &[Detection], top_k: Option<usize>) -> Vec<ScoredSegment> {
    let mut out: Vec<ScoredSegment> = dets
        .iter()
        .filter(|d| d.start < d.end)
        .flat_map(|d| {
            d.class_probs.iter().enumerate().map(move |(class, &score)| ScoredSegment {
                video,
                start: d.start,
                end: d.end,
                class,
                score,
            })
        })
        .collect();
    if let Some(k) = top_k {
        out = ranked(&out).into_iter().take(k).cloned().collect();
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub thresholds: Vec<f64>,
    /// `per_class[c][t]`; `None` for classes without ground truth.
    pub per_class: Vec<Vec<Option<f64>>>,
    pub map: Vec<f64>,
    pub average_map: f64,
    pub nms: bool,
}

pub fn mean_ap(dets: &[ScoredSegment], gts: &[GroundTruth], num_classes: usize, cfg: &EvalConfig) -> MapReport {
    let dets = if cfg.nms_enabled { nms(dets, cfg.nms_iou) } else { dets.to_vec() };
    let mut per_class = vec![vec![None; cfg.iou_thresholds.len()]; num_classes];
    for (c, row) in per_class.iter_mut().enumerate() {
        let g: Vec<GroundTruth> = gts.iter().filter(|g| g.class == c).cloned().collect();
        if g.is_empty() {
            continue;
        }
        let d: Vec<ScoredSegment> = dets.iter().filter(|d| d.class == c).cloned().collect();
        for (t, &thr) in cfg.iou_thresholds.iter().enumerate() {
            row[t] = Some(average_precision(&d, &g, thr));
        }
    }
    let map: Vec<f64> = (0..cfg.iou_thresholds.len())
        .map(|t| {
            let vals: Vec<f64> = per_class.iter().filter_map(|r| r[t]).collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        })
        .collect();
    let average_map = map.iter().sum::<f64>() / map.len().max(1) as f64;
    MapReport {
        thresholds: cfg.iou_thresholds.clone(),
        per_class,
        map,
        average_map,
        nms: cfg.nms_enabled,
    }
}

impl MapReport {
    /// Rows `class,<thr>...` then `mAP` and `average`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row");
        for t in &self.thresholds {
            let _ = write!(s, ",{t}");
        }
        s.push('\n');
        for (c, row) in self.per_class.iter().enumerate() {
            let _ = write!(s, "class{c}");
            for v in row {
                match v {
                    Some(v) => {
                        let _ = write!(s, ",{v}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s.push_str("mAP");
        for v in &self.map {
            let _ = write!(s, ",{v}");
        }
        let _ = writeln!(s, "\naverage,{}", self.average_map);
        s
    }
}
