//! Multi-scale adapter, top-k query selection and the deformable decoder stack.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    sine_position_encoding, DeformAttnConfig, DeformableAttention, Graph, LayerNorm, Linear,
    MultiHeadSelfAttention, OffsetInit, ParamId, ParamStore,
};
use crate::tensor::ops::sigmoid;
use crate::tensor::{Float, Tensor, Var};

/// Class-head bias so every class starts at this sigmoid probability.
pub const PRIOR_PROB: f64 = 0.01;

/// Adapter output: `levels[l]` is `[T_l, D]` with `T_{l+1} = ceil(T_l / 2)`.
#[derive(Clone, Debug)]
pub struct MultiScale {
    pub levels: Vec<Var>,
    pub lengths: Vec<usize>,
}

/// Level lengths produced from `t0` snippets, or an error if `t0 < 2^(L−1)`.
pub fn level_lengths(t0: usize, levels: usize) -> Result<Vec<usize>> {
    if levels == 0 {
        return Err(Error::Config("at least one feature level is required".into()));
    }
    let need = 1usize << (levels - 1);
    if t0 < need {
        return Err(Error::InvalidArgument(format!(
            "sequence of {t0} snippets is too short for {levels} levels (needs {need})"
        )));
    }
    let mut out = vec![t0];
    for _ in 1..levels {
        let last = *out.last().unwrap();
        out.push(last.div_ceil(2));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct MultiScaleAdapter {
    pub embeddings: Vec<ParamId>,
}

impl MultiScaleAdapter {
    /// Level embeddings are learned and start at zero.
    pub fn new<F: Float>(store: &mut ParamStore<F>, dim: usize, levels: usize) -> Self {
        MultiScaleAdapter {
            embeddings: (0..levels)
                .map(|l| store.add(format!("adapter.level{l}"), Tensor::zeros(&[dim])))
                .collect(),
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, z: Var) -> Result<MultiScale> {
        let lengths = level_lengths(g.shape(z)[0], self.embeddings.len())?;
        let mut levels = Vec::with_capacity(lengths.len());
        let mut pooled = z;
        for (l, &e) in self.embeddings.iter().enumerate() {
            if l > 0 {
                pooled = g.avg_pool2(pooled)?;
            }
            let e = g.param(e);
            levels.push(g.add(pooled, e)?);
        }
        Ok(MultiScale { levels, lengths })
    }
}

/// One candidate query position on the flattened multi-scale grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Position {
    pub level: usize,
    pub index: usize,
    pub center: f64,
    pub width: f64,
}

/// Time-aligned references for every position: `c = (t + 0.5)/T_l`, `d = 2^l / T_1` (0-based `l`).
pub fn positions(lengths: &[usize]) -> Vec<Position> {
    let t1 = lengths[0] as f64;
    let mut out = Vec::with_capacity(lengths.iter().sum());
    for (level, &len) in lengths.iter().enumerate() {
        let width = (1u64 << level) as f64 / t1;
        for index in 0..len {
            out.push(Position {
                level,
                index,
                center: (index as f64 + 0.5) / len as f64,
                width,
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    TopK,
    /// Uniform-coverage stand-in: one best position per equal time bin.
    UniformBins,
}

/// Ranks positions by `(score desc, level asc, index asc)` and keeps `nq`.
pub fn select_queries(scores: &[f64], pos: &[Position], nq: usize, mode: SelectionMode) -> Result<Vec<usize>> {
    if scores.len() != pos.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} positions",
            scores.len(),
            pos.len()
        )));
    }
    if nq > pos.len() {
        return Err(Error::InvalidArgument(format!(
            "{nq} queries requested from only {} positions",
            pos.len()
        )));
    }
    let mut order: Vec<usize> = (0..pos.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(pos[a].level.cmp(&pos[b].level))
            .then(pos[a].index.cmp(&pos[b].index))
    });
    match mode {
        SelectionMode::TopK => {
            order.truncate(nq);
            Ok(order)
        }
        SelectionMode::UniformBins => {
            let mut taken = vec![false; pos.len()];
            let mut picked = Vec::with_capacity(nq);
            for bin in 0..nq {
                let (lo, hi) = (bin as f64 / nq as f64, (bin + 1) as f64 / nq as f64);
                if let Some(&i) = order
                    .iter()
                    .find(|&&i| !taken[i] && pos[i].center >= lo && pos[i].center < hi)
                {
                    taken[i] = true;
                    picked.push(i);
                }
            }
            for &i in &order {
                if picked.len() == nq {
                    break;
                }
                if !taken[i] {
                    taken[i] = true;
                    picked.push(i);
                }
            }
            Ok(picked)
        }
    }
}

/// Actionness scoring and `F_q⁰ = LayerNorm(Linear(feature))` query embedding.
#[derive(Clone, Debug)]
pub struct QuerySelector {
    pub actionness: Linear,
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl QuerySelector {
    pub fn new<F: Float, R: Rng + ?Sized>(store: &mut ParamStore<F>, dim: usize, rng: &mut R) -> Self {
        let actionness = Linear::new(store, "select.actionness", dim, 1, rng);
        let prior = F::of(-((1.0 - PRIOR_PROB) / PRIOR_PROB).ln());
        store.get_mut(actionness.bias.unwrap()).data_mut()[0] = prior;
        QuerySelector {
            actionness,
            proj: Linear::new(store, "select.proj", dim, dim, rng),
            norm: LayerNorm::new(store, "select.norm", dim),
        }
    }

    /// Actionness logits `[P, 1]` over the row-stacked levels `[P, D]`.
    pub fn scores<F: Float>(&self, g: &mut Graph<F>, flat: Var) -> Result<Var> {
        self.actionness.forward(g, flat)
    }

    pub fn embed<F: Float>(&self, g: &mut Graph<F>, flat: Var, selected: &[usize]) -> Result<Var> {
        let picked = g.gather_rows(flat, selected)?;
        let q = self.proj.forward(g, picked)?;
        self.norm.forward(g, q)
    }
}

/// Decoder sublayer orders, one per row of the operation-sequence ablation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderSequence {
    SaCcaFfn,
    SaCca15Ffn,
    SaCca20Ffn,
    SaAcaFfn,
    SaCcaCcaFfn,
    #[default]
    SaCcaAcaFfn,
    SaAcaCcaFfn,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SublayerKind {
    SelfAttention,
    /// Deformable cross-attention with central offsets scaled by the factor.
    Central(f64),
    Adjacent,
    Ffn,
}

impl SublayerKind {
    pub fn label(&self) -> &'static str {
        match self {
            SublayerKind::SelfAttention => "sa",
            SublayerKind::Central(_) => "cca",
            SublayerKind::Adjacent => "aca",
            SublayerKind::Ffn => "ffn",
        }
    }
}

impl DecoderSequence {
    pub fn sublayers(&self) -> Vec<SublayerKind> {
        use SublayerKind::*;
        let cross: &[SublayerKind] = match self {
            DecoderSequence::SaCcaFfn => &[Central(1.0)],
            DecoderSequence::SaCca15Ffn => &[Central(1.5)],
            DecoderSequence::SaCca20Ffn => &[Central(2.0)],
            DecoderSequence::SaAcaFfn => &[Adjacent],
            DecoderSequence::SaCcaCcaFfn => &[Central(1.0), Central(1.0)],
            DecoderSequence::SaCcaAcaFfn => &[Central(1.0), Adjacent],
            DecoderSequence::SaAcaCcaFfn => &[Adjacent, Central(1.0)],
        };
        let mut out = vec![SelfAttention];
        out.extend_from_slice(cross);
        out.push(Ffn);
        out
    }

    pub fn uses_adjacent(&self) -> bool {
        self.sublayers().contains(&SublayerKind::Adjacent)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub num_classes: usize,
    pub attention: DeformAttnConfig,
    pub sequence: DecoderSequence,
}

#[derive(Clone, Debug)]
enum Block {
    SelfAttention(MultiHeadSelfAttention),
    Cross(DeformableAttention),
    Ffn(Linear, Linear),
}

#[derive(Clone, Debug)]
pub struct Sublayer {
    pub kind: SublayerKind,
    block: Block,
    pub norm: LayerNorm,
}

impl Sublayer {
    pub fn cross_attention(&self) -> Option<&DeformableAttention> {
        match &self.block {
            Block::Cross(a) => Some(a),
            _ => None,
        }
    }
}

/// Post-norm decoder layer with its own refinement and class heads.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub sublayers: Vec<Sublayer>,
    pub refine: Linear,
    pub class_head: Linear,
}

/// What one decoder layer produced for all queries.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub embedding: Var,
    /// References this layer attended around (detached input).
    pub refs_in: Tensor<f64>,
    /// Refined `(center, width)`, `[Nq, 2]`, differentiable w.r.t. the refinement head.
    pub refs: Var,
    pub logits: Var,
    /// Sampling positions of every cross-attention sublayer, in order.
    pub samples: Vec<(SublayerKind, Var)>,
}

impl DecoderLayer {
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &DecoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sublayers = Vec::new();
        for (i, kind) in cfg.sequence.sublayers().into_iter().enumerate() {
            let sub = format!("{name}.{i}{}", kind.label());
            let block = match kind {
                SublayerKind::SelfAttention => Block::SelfAttention(MultiHeadSelfAttention::new(
                    store,
                    &sub,
                    cfg.dim,
                    cfg.attention.heads,
                    rng,
                )?),
                SublayerKind::Central(scale) => Block::Cross(DeformableAttention::new(
                    store,
                    &sub,
                    cfg.dim,
                    cfg.attention,
                    OffsetInit::Central { scale },
                    rng,
                )?),
                SublayerKind::Adjacent => Block::Cross(DeformableAttention::new(
                    store,
                    &sub,
                    cfg.dim,
                    cfg.attention,
                    OffsetInit::Adjacent,
                    rng,
                )?),
                SublayerKind::Ffn => Block::Ffn(
                    Linear::new(store, &format!("{sub}.fc1"), cfg.dim, cfg.hidden, rng),
                    Linear::new(store, &format!("{sub}.fc2"), cfg.hidden, cfg.dim, rng),
                ),
            };
            sublayers.push(Sublayer {
                kind,
                block,
                norm: LayerNorm::new(store, &format!("{sub}.norm"), cfg.dim),
            });
        }
        let refine = Linear::zeros(store, &format!("{name}.refine"), cfg.dim, 2);
        let class_head = Linear::new(store, &format!("{name}.class"), cfg.dim, cfg.num_classes, rng);
        let prior = F::of(-((1.0 - PRIOR_PROB) / PRIOR_PROB).ln());
        for b in store.get_mut(class_head.bias.unwrap()).data_mut() {
            *b = prior;
        }
        Ok(DecoderLayer {
            sublayers,
            refine,
            class_head,
        })
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, x: Var, refs: &Tensor<F>, levels: &[Var]) -> Result<LayerOutput> {
        let dim = g.shape(x)[1];
        let pe = sine_position_encoding(refs, dim)?;
        let pos = g.constant(pe);
        let mut x = x;
        let mut samples = Vec::new();
        for sub in &self.sublayers {
            let y = match &sub.block {
                Block::SelfAttention(attn) => attn.forward(g, x, Some(pos))?,
                Block::Cross(attn) => {
                    let q = g.add(x, pos)?;
                    let (y, p) = attn.forward(g, q, refs, levels)?;
                    samples.push((sub.kind, p));
                    y
                }
                Block::Ffn(fc1, fc2) => {
                    let h = fc1.forward(g, x)?;
                    let h = g.silu(h);
                    fc2.forward(g, h)?
                }
            };
            let sum = g.add(x, y)?;
            x = sub.norm.forward(g, sum)?;
        }
        let delta = self.refine.forward(g, x)?;
        let refined = g.refine_refs(delta, refs)?;
        let logits = self.class_head.forward(g, x)?;
        Ok(LayerOutput {
            embedding: x,
            refs_in: refs.cast(),
            refs: refined,
            logits,
            samples,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub layers: Vec<DecoderLayer>,
}

impl Decoder {
    pub fn new<F: Float, R: Rng + ?Sized>(store: &mut ParamStore<F>, cfg: DecoderConfig, rng: &mut R) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        if cfg.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if cfg.dim % 4 != 0 {
            return Err(Error::Config(format!(
                "model width must be a multiple of 4 for position encodings, got {}",
                cfg.dim
            )));
        }
        cfg.attention.validate(cfg.dim)?;
        let layers = (0..cfg.layers)
            .map(|l| DecoderLayer::new(store, &format!("decoder.{l}"), &cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Decoder { cfg, layers })
    }

    /// Runs every layer; references are detached between layers.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, queries: Var, refs: Tensor<F>, levels: &[Var]) -> Result<Vec<LayerOutput>> {
        self.run(g, queries, refs, levels, None)
    }

    /// Like [`Decoder::forward`], but layer `l > 0` reads `inputs[l]` as its
    /// references instead of the previous layer's refinement.
    pub fn forward_with_refs<F: Float>(
        &self,
        g: &mut Graph<F>,
        queries: Var,
        inputs: &[Tensor<F>],
        levels: &[Var],
    ) -> Result<Vec<LayerOutput>> {
        if inputs.len() != self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "{} reference inputs for {} decoder layers",
                inputs.len(),
                self.layers.len()
            )));
        }
        self.run(g, queries, inputs[0].clone(), levels, Some(inputs))
    }

    fn run<F: Float>(
        &self,
        g: &mut Graph<F>,
        queries: Var,
        refs: Tensor<F>,
        levels: &[Var],
        fixed: Option<&[Tensor<F>]>,
    ) -> Result<Vec<LayerOutput>> {
        let mut x = queries;
        let mut refs = refs;
        let mut out = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            if let Some(f) = fixed {
                refs = f[l].clone();
            }
            let o = layer.forward(g, x, &refs, levels)?;
            x = o.embedding;
            refs = g.value(o.refs).clone();
            out.push(o);
        }
        Ok(out)
    }
}

/// A scored segment prediction in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_probs: Vec<f64>,
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

impl Detection {
    pub fn label(&self) -> usize {
        let mut best = 0;
        for (c, &p) in self.class_probs.iter().enumerate() {
            if p > self.class_probs[best] {
                best = c;
            }
        }
        best
    }
}

/// One detection per query from the final layer's logits and refined references.
pub fn predict<F: Float>(logits: &Tensor<F>, refs: &Tensor<F>, duration: f64) -> Vec<Detection> {
    (0..logits.rows())
        .map(|q| {
            let class_probs: Vec<f64> = logits
                .row(q)
                .iter()
                .map(|&x| sigmoid(x.to_f64().unwrap_or(0.0)))
                .collect();
            let c = refs.at(q, 0).to_f64().unwrap_or(0.0);
            let d = refs.at(q, 1).to_f64().unwrap_or(0.0);
            let start = ((c - 0.5 * d) * duration).max(0.0);
            let end = ((c + 0.5 * d) * duration).min(duration);
            let score = class_probs.iter().copied().fold(0.0, f64::max);
            Detection {
                class_probs,
                start,
                end,
                score,
            }
        })
        .collect()
}
