//! Set-prediction losses: focal classification, GIoU and log-ratio regression.

use serde::{Deserialize, Serialize};

use crate::decoder::Position;
use crate::error::{Error, Result};
use crate::matching::{hungarian_match, Matching};
use crate::model::ModelOutput;
use crate::nn::Graph;
use crate::tensor::ops::{focal_from_prob, sigmoid};
use crate::tensor::{Float, SegmentLossKind, Tensor, Var};

/// Cost assigned to encoder positions whose center lies outside a ground truth.
pub const OUTSIDE_COST: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    pub cls: f64,
    pub giou: f64,
    pub lr: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            cls: 2.0,
            giou: 2.0,
            lr: 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: CostWeights,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Supervise every decoder layer, not only the last.
    pub aux_loss: bool,
    /// Weight of the encoder actionness matching loss.
    pub encoder_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: CostWeights::default(),
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            aux_loss: true,
            encoder_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.weights;
        for (name, v) in [("cls", w.cls), ("giou", w.giou), ("lr", w.lr)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("loss.weights.{name} must be a nonnegative number")));
            }
        }
        if w.cls + w.giou + w.lr == 0.0 {
            return Err(Error::Config("loss.weights must not all be zero".into()));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::Config("loss.focal_alpha must lie in [0, 1]".into()));
        }
        if !(self.focal_gamma >= 0.0) || !(self.encoder_weight >= 0.0) {
            return Err(Error::Config("loss.focal_gamma and loss.encoder_weight must be nonnegative".into()));
        }
        Ok(())
    }
}

/// A ground truth in normalized video time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub center: f64,
    pub width: f64,
    pub class: usize,
}

impl Target {
    pub fn from_seconds(start: f64, end: f64, class: usize, duration: f64) -> Self {
        Target {
            center: 0.5 * (start + end) / duration,
            width: (end - start) / duration,
            class,
        }
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.center - 0.5 * self.width, self.center + 0.5 * self.width)
    }
}

fn require_segment(op: &str, (s, e): (f64, f64)) -> Result<()> {
    if s < e && s.is_finite() && e.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{op}: degenerate segment [{s}, {e}]")))
    }
}

/// 1D generalized IoU of two `(start, end)` segments.
pub fn segment_giou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    require_segment("segment_giou", a)?;
    require_segment("segment_giou", b)?;
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    let hull = a.1.max(b.1) - a.0.min(b.0);
    Ok(inter / union - (hull - union) / hull)
}

/// `|ln(c_pred/c_gt)| + |ln(d_pred/d_gt)|` for positive `(center, width)` pairs.
pub fn log_ratio_distance(pred: (f64, f64), gt: (f64, f64)) -> Result<f64> {
    for v in [pred.0, pred.1, gt.0, gt.1] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "log-ratio distance needs positive coordinates, got {v}"
            )));
        }
    }
    Ok((pred.0 / gt.0).ln().abs() + (pred.1 / gt.1).ln().abs())
}

/// `−α_t (1 − p_t)^γ ln p_t` with the probability clamped to `[1e-7, 1 − 1e-7]`.
pub fn focal_loss(prob: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
    focal_from_prob(prob, if target { 1.0 } else { 0.0 }, alpha, gamma)
}

/// Matching cost of predicting `(center, width)` with `class_prob` on the target's class.
pub fn match_cost(gt: &Target, class_prob: f64, pred: (f64, f64), cfg: &LossConfig) -> f64 {
    let w = cfg.weights;
    let cls = focal_loss(class_prob, true, cfg.focal_alpha, cfg.focal_gamma);
    let (c, d) = pred;
    let pbounds = (c - 0.5 * d, c + 0.5 * d);
    let giou = segment_giou(pbounds, gt.bounds()).unwrap_or(-1.0);
    let lr = log_ratio_distance((c.max(1e-6), d.max(1e-6)), (gt.center.max(1e-6), gt.width.max(1e-6)))
        .unwrap_or(0.0);
    w.cls * cls + w.giou * (1.0 - giou) + w.lr * lr
}

/// Per-layer and encoder matchings; fixing them makes the loss smooth.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossPlan {
    pub layers: Vec<Matching>,
    pub encoder: Matching,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub cls: f64,
    pub giou: f64,
    pub lr: f64,
    pub encoder: f64,
}

pub struct LossOutput {
    pub total: Var,
    pub parts: LossParts,
    pub plan: LossPlan,
}

fn to_f64<F: Float>(t: &Tensor<F>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
}

/// Decoder-layer matching between targets and the layer's predictions.
pub fn match_layer(targets: &[Target], probs: &[f64], refs: &[f64], num_classes: usize, cfg: &LossConfig) -> Result<Matching> {
    let nq = refs.len() / 2;
    let cost: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| {
            (0..nq)
                .map(|q| match_cost(t, probs[q * num_classes + t.class], (refs[2 * q], refs[2 * q + 1]), cfg))
                .collect()
        })
        .collect();
    hungarian_match(&cost, nq)
}

/// Encoder matching: each target claims one position whose center it contains.
pub fn match_encoder(targets: &[Target], probs: &[f64], positions: &[Position], cfg: &LossConfig) -> Result<Matching> {
    let w = cfg.weights;
    let cost: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| {
            let (s, e) = t.bounds();
            positions
                .iter()
                .zip(probs)
                .map(|(p, &prob)| {
                    let seg = (p.center - 0.5 * p.width, p.center + 0.5 * p.width);
                    let giou = segment_giou(seg, (s, e)).unwrap_or(-1.0);
                    let inside = p.center >= s && p.center <= e;
                    w.cls * focal_loss(prob, true, cfg.focal_alpha, cfg.focal_gamma)
                        + w.giou * (1.0 - giou)
                        + if inside { 0.0 } else { OUTSIDE_COST }
                })
                .collect()
        })
        .collect();
    hungarian_match(&cost, positions.len())
}

/// Total training loss for one video.
///
/// With a `plan`, the stored matchings are used instead of recomputing them.
pub fn total_loss<F: Float>(
    g: &mut Graph<F>,
    out: &ModelOutput,
    targets: &[Target],
    num_classes: usize,
    cfg: &LossConfig,
    plan: Option<&LossPlan>,
) -> Result<LossOutput> {
    if let Some(t) = targets.iter().find(|t| t.class >= num_classes) {
        return Err(Error::InvalidArgument(format!("target class {} out of range", t.class)));
    }
    let (alpha, gamma) = (F::of(cfg.focal_alpha), F::of(cfg.focal_gamma));
    let norm = (targets.len().max(1)) as f64;
    let w = cfg.weights;
    let first = if cfg.aux_loss { 0 } else { out.layers.len() - 1 };
    let mut terms: Vec<Var> = Vec::new();
    let mut parts = LossParts::default();
    let mut used = LossPlan::default();
    for (li, layer) in out.layers.iter().enumerate().skip(first) {
        let probs: Vec<f64> = to_f64(g.value(layer.logits)).into_iter().map(sigmoid).collect();
        let refs = to_f64(g.value(layer.refs));
        let nq = refs.len() / 2;
        let matching = match plan {
            Some(p) => p.layers[li - first].clone(),
            None => match_layer(targets, &probs, &refs, num_classes, cfg)?,
        };
        let mut onehot = Tensor::<F>::zeros(&[nq, num_classes]);
        for &(i, q) in &matching.pairs {
            onehot.data_mut()[q * num_classes + targets[i].class] = F::one();
        }
        let focal = g.focal_loss(layer.logits, &onehot, alpha, gamma)?;
        let cls = g.sum(focal);
        let cls = g.scale(cls, F::of(w.cls / norm));
        parts.cls += g.value(cls).data()[0].to_f64().unwrap_or(0.0);
        terms.push(cls);
        if !matching.pairs.is_empty() {
            let qs: Vec<usize> = matching.pairs.iter().map(|&(_, q)| q).collect();
            let target = Tensor::new(
                vec![qs.len(), 2],
                matching
                    .pairs
                    .iter()
                    .flat_map(|&(i, _)| [F::of(targets[i].center), F::of(targets[i].width)])
                    .collect(),
            )?;
            let pred = g.gather_rows(layer.refs, &qs)?;
            for (kind, weight, slot) in [
                (SegmentLossKind::Giou, w.giou, &mut parts.giou),
                (SegmentLossKind::LogRatio, w.lr, &mut parts.lr),
            ] {
                if weight == 0.0 {
                    continue;
                }
                let l = g.segment_loss(pred, &target, kind)?;
                let l = g.sum(l);
                let l = g.scale(l, F::of(weight / norm));
                *slot += g.value(l).data()[0].to_f64().unwrap_or(0.0);
                terms.push(l);
            }
        }
        used.layers.push(matching);
    }
    if cfg.encoder_weight > 0.0 {
        let probs: Vec<f64> = to_f64(g.value(out.actionness)).into_iter().map(sigmoid).collect();
        let matching = match plan {
            Some(p) => p.encoder.clone(),
            None => match_encoder(targets, &probs, &out.positions, cfg)?,
        };
        let mut target = Tensor::<F>::zeros(&[probs.len(), 1]);
        for &(_, j) in &matching.pairs {
            target.data_mut()[j] = F::one();
        }
        let focal = g.focal_loss(out.actionness, &target, alpha, gamma)?;
        let enc = g.sum(focal);
        let enc = g.scale(enc, F::of(cfg.encoder_weight * w.cls / norm));
        parts.encoder = g.value(enc).data()[0].to_f64().unwrap_or(0.0);
        terms.push(enc);
        used.encoder = matching;
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    parts.total = g.value(total).data()[0].to_f64().unwrap_or(f64::NAN);
    Ok(LossOutput {
        total,
        parts,
        plan: used,
    })
}
