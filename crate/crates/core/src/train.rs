//! AdamW optimization loop and dataset-level evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossConfig, LossParts};
use crate::metrics::{flatten_detections, mean_ap, EvalConfig, GroundTruth, MapReport, ScoredSegment};
use crate::model::DigitModel;
use crate::nn::{Graph, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            epochs: 100,
            grad_clip: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "optimizer.learning_rate must be positive and weight_decay nonnegative".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::Config("optimizer.epochs must be positive".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("optimizer.grad_clip must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("optimizer betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Cosine decay from the base rate to zero over `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let frac = step as f64 / total.max(1) as f64;
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Adam moments with decoupled weight decay on matrices and kernels.
pub struct AdamW {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: i32,
    cfg: OptimConfig,
}

impl AdamW {
    pub fn new(params: &ParamStore<f32>, cfg: OptimConfig) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        AdamW {
            m: zeros(),
            v: zeros(),
            step: 0,
            cfg,
        }
    }

    /// Clips `grads` to the configured global norm and applies one update.
    /// Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &mut [(ParamId, Tensor<f32>)], lr: f64) -> f64 {
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.data())
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt();
        if norm > self.cfg.grad_clip {
            let k = (self.cfg.grad_clip / norm) as f32;
            for (_, g) in grads.iter_mut() {
                for x in g.data_mut() {
                    *x *= k;
                }
            }
        }
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1 as f32, self.cfg.beta2 as f32);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let lr = lr as f32;
        let decay = 1.0 - lr * self.cfg.weight_decay as f32;
        for (id, g) in grads.iter() {
            let i = id.index();
            let p = params.get_mut(*id);
            let decays = p.ndim() >= 2;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gr), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * gr;
                *v = b2 * *v + (1.0 - b2) * gr * gr;
                if decays {
                    *w *= decay;
                }
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
            }
        }
        norm
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean over the epoch's videos.
    pub loss: LossParts,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,lr,total,cls,giou,log_ratio,encoder";

    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.learning_rate, l.total, l.cls, l.giou, l.lr, l.encoder
        )
    }
}

/// Trains `model` for `optim.epochs` on `data`, one video per step.
pub fn train(
    model: &mut DigitModel<f32>,
    data: &Split,
    loss_cfg: &LossConfig,
    optim: &OptimConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    optim.validate()?;
    loss_cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let targets: Vec<_> = data.annotations.videos.iter().map(|v| v.targets()).collect();
    let num_classes = model.config.num_classes;
    let mut opt = AdamW::new(&model.params, optim.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(optim.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let total_steps = optim.epochs * data.len();
    let mut step = 0;
    let mut logs = Vec::with_capacity(optim.epochs);
    for epoch in 1..=optim.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossParts::default();
        let lr_epoch = optim.lr_at(step, total_steps);
        for &i in &order {
            let lr = optim.lr_at(step, total_steps);
            let mut grads = {
                let mut g = Graph::new(&model.params);
                let out = model.forward(&mut g, &data.features[i].features, None)?;
                let loss = total_loss(&mut g, &out, &targets[i], num_classes, loss_cfg, None)?;
                if !loss.parts.total.is_finite() {
                    return Err(Error::NonFinite {
                        param: usize::MAX,
                        coordinate: i,
                    });
                }
                g.backward(loss.total)?;
                let p = loss.parts;
                sum.total += p.total;
                sum.cls += p.cls;
                sum.giou += p.giou;
                sum.lr += p.lr;
                sum.encoder += p.encoder;
                g.param_grads()
            };
            opt.step(&mut model.params, &mut grads, lr);
            step += 1;
        }
        let n = data.len() as f64;
        let log = EpochLog {
            epoch,
            learning_rate: lr_epoch,
            loss: LossParts {
                total: sum.total / n,
                cls: sum.cls / n,
                giou: sum.giou / n,
                lr: sum.lr / n,
                encoder: sum.encoder / n,
            },
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Scored segments for every video of `split` (NMS is applied by `mean_ap`).
pub fn predict_split(model: &DigitModel<f32>, split: &Split, cfg: &EvalConfig) -> Result<Vec<ScoredSegment>> {
    let mut out = Vec::new();
    for (v, seq) in split.features.iter().enumerate() {
        let dets = model.detect(&seq.features, seq.duration)?;
        out.extend(flatten_detections(v, &dets, cfg.top_k_per_video));
    }
    Ok(out)
}

pub fn ground_truths(split: &Split) -> Vec<GroundTruth> {
    split
        .annotations
        .videos
        .iter()
        .enumerate()
        .flat_map(|(v, a)| {
            a.instances.iter().map(move |i| GroundTruth {
                video: v,
                start: i.start,
                end: i.end,
                class: i.class,
            })
        })
        .collect()
}

pub fn evaluate(model: &DigitModel<f32>, split: &Split, cfg: &EvalConfig) -> Result<MapReport> {
    cfg.validate()?;
    let dets = predict_split(model, split, cfg)?;
    Ok(mean_ap(&dets, &ground_truths(split), model.config.num_classes, cfg))
}
