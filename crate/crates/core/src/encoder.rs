//! Input embedding and the multi-dilated gated encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv1d, Graph, LayerNorm, Linear, ParamStore};
use crate::tensor::{Float, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    /// Split channels over dilations `1..=N_d`, gate with `SiLU(Z_gate)`.
    #[default]
    Mdge,
    /// Same widths and kernel, every branch at dilation 1, no gate.
    PlainConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub hidden: usize,
    pub num_dilations: usize,
    pub kernel_size: usize,
    pub layers: usize,
    pub variant: EncoderVariant,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 || self.num_dilations == 0 || self.layers == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "encoder kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.hidden % self.num_dilations != 0 {
            return Err(Error::Config(format!(
                "hidden width {} not divisible by num_dilations {}",
                self.hidden, self.num_dilations
            )));
        }
        Ok(())
    }

    /// Radius of influence of one input position on the encoder output.
    pub fn receptive_radius(&self) -> usize {
        let max_dilation = match self.variant {
            EncoderVariant::Mdge => self.num_dilations,
            EncoderVariant::PlainConv => 1,
        };
        self.layers * max_dilation * (self.kernel_size - 1) / 2
    }
}

/// `Z⁰ = LayerNorm(Conv(X))`, a single length-preserving convolution `C → D`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub conv: Conv1d,
    pub norm: LayerNorm,
}

impl Embedding {
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        input_dim: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Embedding {
            conv: Conv1d::new(store, "embed.conv", input_dim, dim, 3, 1, rng)?,
            norm: LayerNorm::new(store, "embed.norm", dim),
        })
    }

    /// `x: [T₀, C] -> [T₀, D]`.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.conv.in_ch {
            return Err(Error::ShapeMismatch {
                op: "embedding input",
                lhs: shape.to_vec(),
                rhs: vec![0, self.conv.in_ch],
            });
        }
        let z = self.conv.forward(g, x)?;
        self.norm.forward(g, z)
    }
}

/// Intermediate values of one encoder layer, in time-major layout.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub conv: Var,
    /// `None` for the ungated variant.
    pub gate: Option<Var>,
    pub branches: Vec<Var>,
    pub concat: Var,
    /// Output of the elementwise gate (or activation), before the output projection.
    pub gated: Var,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm: LayerNorm,
    pub proj_conv: Linear,
    pub proj_gate: Option<Linear>,
    pub branches: Vec<Conv1d>,
    pub out_proj: Linear,
}

impl EncoderLayer {
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let group = cfg.hidden / cfg.num_dilations;
        let gated = cfg.variant == EncoderVariant::Mdge;
        let branches = (1..=cfg.num_dilations)
            .map(|i| {
                let dilation = if gated { i } else { 1 };
                Conv1d::new(
                    store,
                    &format!("{name}.branch{i}"),
                    group,
                    group,
                    cfg.kernel_size,
                    dilation,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderLayer {
            norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.dim),
            proj_conv: Linear::new(store, &format!("{name}.proj_conv"), cfg.dim, cfg.hidden, rng),
            proj_gate: gated.then(|| Linear::new(store, &format!("{name}.proj_gate"), cfg.dim, cfg.hidden, rng)),
            branches,
            out_proj: Linear::new(store, &format!("{name}.out_proj"), cfg.hidden, cfg.dim, rng),
        })
    }

    pub fn dilations(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.dilation).collect()
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, z: Var) -> Result<Var> {
        Ok(self.trace(g, z)?.output)
    }

    pub fn trace<F: Float>(&self, g: &mut Graph<F>, z: Var) -> Result<LayerTrace> {
        let h = self.norm.forward(g, z)?;
        let conv = self.proj_conv.forward(g, h)?;
        let gate = match &self.proj_gate {
            Some(p) => Some(p.forward(g, h)?),
            None => None,
        };
        let group = self.branches[0].in_ch;
        let mut branches = Vec::with_capacity(self.branches.len());
        for (i, b) in self.branches.iter().enumerate() {
            let part = g.slice_cols(conv, i * group, group)?;
            branches.push(b.forward(g, part)?);
        }
        let concat = if branches.len() == 1 { branches[0] } else { g.concat_cols(&branches)? };
        let gated = match gate {
            Some(gt) => {
                let s = g.silu(gt);
                g.mul(concat, s)?
            }
            None => g.silu(concat),
        };
        let proj = self.out_proj.forward(g, gated)?;
        let output = g.add(z, proj)?;
        Ok(LayerTrace {
            conv,
            gate,
            branches,
            concat,
            gated,
            output,
        })
    }
}

/// Stack of encoder layers followed by a closing LayerNorm on the residual stream.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNorm,
}

impl Encoder {
    pub fn new<F: Float, R: Rng + ?Sized>(store: &mut ParamStore<F>, cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.layers)
            .map(|l| EncoderLayer::new(store, &format!("encoder.{l}"), &cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Encoder {
            cfg,
            layers,
            final_norm: LayerNorm::new(store, "encoder.final_norm", cfg.dim),
        })
    }

    /// `Z⁰: [T₀, D] -> Z^(L_E): [T₀, D]`.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, z0: Var) -> Result<Var> {
        let mut z = z0;
        for layer in &self.layers {
            z = layer.forward(g, z)?;
        }
        self.final_norm.forward(g, z)
    }
}
