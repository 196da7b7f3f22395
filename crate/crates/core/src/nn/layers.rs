use rand::Rng;

use super::params::{Graph, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor, Var};

/// Glorot-uniform matrix with the given fan-in / fan-out.
pub fn xavier_uniform<F: Float, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<F> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::of(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Xavier-uniform weight, zero bias.
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = xavier_uniform(&[out_dim, in_dim], in_dim, out_dim, rng);
        Self::from_parts(store, name, w, Some(Tensor::zeros(&[out_dim])))
    }

    pub fn zeros<F: Float>(store: &mut ParamStore<F>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::from_parts(
            store,
            name,
            Tensor::zeros(&[out_dim, in_dim]),
            Some(Tensor::zeros(&[out_dim])),
        )
    }

    pub fn from_parts<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        weight: Tensor<F>,
        bias: Option<Tensor<F>>,
    ) -> Self {
        let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
        let weight = store.add(format!("{name}.weight"), weight);
        let bias = bias.map(|b| store.add(format!("{name}.bias"), b));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x: [n, in] -> [n, out]`.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], F::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            dim,
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Length-preserving dilated convolution over time-major `[T, C]` input.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    pub dilation: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if ksize % 2 == 0 {
            return Err(Error::Config(format!("conv kernel size must be odd, got {ksize}")));
        }
        if dilation == 0 {
            return Err(Error::Config("conv dilation must be at least 1".into()));
        }
        let w = xavier_uniform(&[out_ch, in_ch, ksize], in_ch * ksize, out_ch * ksize, rng);
        Ok(Conv1d {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch])),
            in_ch,
            out_ch,
            ksize,
            dilation,
        })
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv1d(x, w, Some(b), self.dilation)
    }
}
