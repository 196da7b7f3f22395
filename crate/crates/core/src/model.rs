//! Full detector: embedding, encoder, adapter, query selection, decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{
    positions, predict, select_queries, Decoder, DecoderConfig, DecoderSequence, Detection, LayerOutput,
    MultiScale, MultiScaleAdapter, Position, QuerySelector, SelectionMode,
};
use crate::encoder::{Embedding, Encoder, EncoderConfig, EncoderVariant};
use crate::error::{Error, Result};
use crate::nn::{DeformAttnConfig, Graph, ParamStore};
use crate::tensor::{Float, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub dim: usize,
    pub hidden: usize,
    pub num_dilations: usize,
    pub kernel_size: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub levels: usize,
    pub num_queries: usize,
    pub heads: usize,
    pub points: usize,
    pub num_classes: usize,
    pub encoder_variant: EncoderVariant,
    pub decoder_sequence: DecoderSequence,
    pub use_aqs_stub: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 16,
            dim: 32,
            hidden: 96,
            num_dilations: 6,
            kernel_size: 5,
            encoder_layers: 4,
            decoder_layers: 4,
            levels: 4,
            num_queries: 40,
            heads: 8,
            points: 4,
            num_classes: 3,
            encoder_variant: EncoderVariant::Mdge,
            decoder_sequence: DecoderSequence::SaCcaAcaFfn,
            use_aqs_stub: false,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            dim: self.dim,
            hidden: self.hidden,
            num_dilations: self.num_dilations,
            kernel_size: self.kernel_size,
            layers: self.encoder_layers,
            variant: self.encoder_variant,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            dim: self.dim,
            hidden: self.hidden,
            layers: self.decoder_layers,
            num_classes: self.num_classes,
            attention: DeformAttnConfig {
                heads: self.heads,
                points: self.points,
                levels: self.levels,
            },
            sequence: self.decoder_sequence,
        }
    }

    pub fn selection(&self) -> SelectionMode {
        if self.use_aqs_stub {
            SelectionMode::UniformBins
        } else {
            SelectionMode::TopK
        }
    }

    /// Shortest input the adapter accepts.
    pub fn min_length(&self) -> usize {
        1 << self.levels.saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("model.input_dim must be positive".into()));
        }
        if self.levels == 0 || self.num_queries == 0 {
            return Err(Error::Config("model.levels and model.num_queries must be positive".into()));
        }
        if self.decoder_sequence.uses_adjacent() && self.points % 2 != 0 {
            return Err(Error::Config(format!(
                "model.points must be even for adjacent cross-attention, got {}",
                self.points
            )));
        }
        self.encoder().validate()?;
        let d = self.decoder();
        if d.layers == 0 || d.num_classes == 0 || d.dim % 4 != 0 {
            return Err(Error::Config(
                "model.decoder_layers and model.num_classes must be positive and model.dim a multiple of 4".into(),
            ));
        }
        d.attention.validate(self.dim)
    }
}

/// Architecture handles plus the parameter values they index.
#[derive(Clone, Debug)]
pub struct DigitModel<F: Float> {
    pub config: ModelConfig,
    pub embed: Embedding,
    pub encoder: Encoder,
    pub adapter: MultiScaleAdapter,
    pub selector: QuerySelector,
    pub decoder: Decoder,
    pub params: ParamStore<F>,
}

/// Discrete choices of one forward pass, replayable with [`DigitModel::forward_frozen`].
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenForward<F> {
    pub selected: Vec<usize>,
    pub layer_refs: Vec<Tensor<F>>,
}

/// Everything a forward pass produced that losses and analyses read.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub embedded: Var,
    pub encoded: Var,
    pub multiscale: MultiScale,
    /// Row-stacked adapter levels `[P, D]`.
    pub flat: Var,
    /// Actionness logits `[P, 1]`.
    pub actionness: Var,
    pub positions: Vec<Position>,
    pub selected: Vec<usize>,
    pub layers: Vec<LayerOutput>,
}

impl ModelOutput {
    pub fn frozen<F: Float>(&self) -> FrozenForward<F> {
        FrozenForward {
            selected: self.selected.clone(),
            layer_refs: self.layers.iter().map(|l| l.refs_in.cast()).collect(),
        }
    }
}

impl<F: Float> DigitModel<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let embed = Embedding::new(&mut params, config.input_dim, config.dim, &mut rng)?;
        let encoder = Encoder::new(&mut params, config.encoder(), &mut rng)?;
        let adapter = MultiScaleAdapter::new(&mut params, config.dim, config.levels);
        let selector = QuerySelector::new(&mut params, config.dim, &mut rng);
        let decoder = Decoder::new(&mut params, config.decoder(), &mut rng)?;
        Ok(DigitModel {
            config,
            embed,
            encoder,
            adapter,
            selector,
            decoder,
            params,
        })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<G: Float>(&self) -> DigitModel<G> {
        DigitModel {
            config: self.config.clone(),
            embed: self.embed.clone(),
            encoder: self.encoder.clone(),
            adapter: self.adapter.clone(),
            selector: self.selector.clone(),
            decoder: self.decoder.clone(),
            params: self.params.cast(),
        }
    }

    /// Forward pass over `features: [T₀, C]`.
    ///
    /// `selection`, when given, replaces the top-k choice of query positions
    /// (flat indices into the stacked levels).
    pub fn forward(&self, g: &mut Graph<F>, features: &Tensor<F>, selection: Option<&[usize]>) -> Result<ModelOutput> {
        self.run(g, features, selection, None)
    }

    /// Forward pass with every data-dependent discrete choice pinned: the
    /// query selection and the references each decoder layer receives.
    /// The result is a smooth function of the parameters, which is what
    /// finite-difference checks need.
    pub fn forward_frozen(&self, g: &mut Graph<F>, features: &Tensor<F>, frozen: &FrozenForward<F>) -> Result<ModelOutput> {
        self.run(g, features, Some(&frozen.selected), Some(&frozen.layer_refs))
    }

    fn run(
        &self,
        g: &mut Graph<F>,
        features: &Tensor<F>,
        selection: Option<&[usize]>,
        layer_refs: Option<&[Tensor<F>]>,
    ) -> Result<ModelOutput> {
        if features.ndim() != 2 || features.cols() != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: features.shape().to_vec(),
                rhs: vec![features.shape()[0], self.config.input_dim],
            });
        }
        let x = g.constant(features.clone());
        let embedded = self.embed.forward(g, x)?;
        let encoded = self.encoder.forward(g, embedded)?;
        let multiscale = self.adapter.forward(g, encoded)?;
        let flat = g.concat_rows(&multiscale.levels)?;
        let actionness = self.selector.scores(g, flat)?;
        let positions = positions(&multiscale.lengths);
        let selected = match selection {
            Some(s) => {
                if s.len() != self.config.num_queries || s.iter().any(|&i| i >= positions.len()) {
                    return Err(Error::InvalidArgument("query selection plan does not fit this input".into()));
                }
                s.to_vec()
            }
            None => {
                let scores: Vec<f64> = g
                    .value(actionness)
                    .data()
                    .iter()
                    .map(|v| v.to_f64().unwrap_or(f64::NEG_INFINITY))
                    .collect();
                select_queries(&scores, &positions, self.config.num_queries, self.config.selection())?
            }
        };
        let queries = self.selector.embed(g, flat, &selected)?;
        let refs = Tensor::new(
            vec![selected.len(), 2],
            selected
                .iter()
                .flat_map(|&i| [F::of(positions[i].center), F::of(positions[i].width)])
                .collect(),
        )?;
        let layers = match layer_refs {
            Some(r) => self.decoder.forward_with_refs(g, queries, r, &multiscale.levels)?,
            None => self.decoder.forward(g, queries, refs, &multiscale.levels)?,
        };
        Ok(ModelOutput {
            embedded,
            encoded,
            multiscale,
            flat,
            actionness,
            positions,
            selected,
            layers,
        })
    }

    /// Raw per-query detections (no NMS) for one video.
    pub fn detect(&self, features: &Tensor<F>, duration: f64) -> Result<Vec<Detection>> {
        let mut g = Graph::frozen(&self.params);
        let out = self.forward(&mut g, features, None)?;
        let last = out.layers.last().expect("decoder has layers");
        Ok(predict(g.value(last.logits), g.value(last.refs), duration))
    }
}
