use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::Linear;
use super::params::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::ops::interp_stencil;
use crate::tensor::{Float, Tensor, Var};

/// Linear interpolation of `features: [T, D]` at normalized time `position`.
///
/// `position` maps to the continuous row index `position·(T−1)` and is clamped
/// to `[0, 1]`.
pub fn sample_linear<F: Float>(features: &Tensor<F>, position: F) -> Vec<F> {
    let (i0, i1, frac, _) = interp_stencil(position, features.rows());
    let (a, b) = (features.row(i0), features.row(i1));
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x * (F::one() - frac) + y * frac)
        .collect()
}

/// Sinusoidal encoding of `(center, width)` rows; half the channels per coordinate.
pub fn sine_position_encoding<F: Float>(refs: &Tensor<F>, dim: usize) -> Result<Tensor<F>> {
    if dim % 4 != 0 {
        return Err(Error::Config(format!(
            "position encoding width must be a multiple of 4, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(refs.rows() * dim);
    for r in 0..refs.rows() {
        for coord in 0..2 {
            let x = refs.at(r, coord).to_f64().unwrap_or(0.0) * std::f64::consts::TAU;
            for i in 0..half / 2 {
                let freq = 10000f64.powf(2.0 * i as f64 / half as f64);
                out.push(F::of((x / freq).sin()));
                out.push(F::of((x / freq).cos()));
            }
        }
    }
    Tensor::new(vec![refs.rows(), dim], out)
}

#[derive(Clone, Debug)]
pub struct MultiHeadSelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadSelfAttention {
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadSelfAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            // a key bias only shifts each softmax row by a constant
            k: Linear::from_parts(
                store,
                &format!("{name}.k"),
                crate::nn::xavier_uniform(&[dim, dim], dim, dim, rng),
                None,
            ),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
            dim,
        })
    }

    /// `x: [T, D]`; `pos`, if given, is added to the query/key input only.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, x: Var, pos: Option<Var>) -> Result<Var> {
        let qk_in = match pos {
            Some(p) => g.add(x, p)?,
            None => x,
        };
        let q = self.q.forward(g, qk_in)?;
        let k = self.k.forward(g, qk_in)?;
        let v = self.v.forward(g, x)?;
        let dh = self.dim / self.heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut parts = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores);
            parts.push(g.matmul(attn, vh)?);
        }
        let merged = if parts.len() == 1 { parts[0] } else { g.concat_cols(&parts)? };
        self.out.forward(g, merged)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeformAttnConfig {
    pub heads: usize,
    pub points: usize,
    pub levels: usize,
}

impl DeformAttnConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.heads == 0 || self.points == 0 || self.levels == 0 {
            return Err(Error::Config(
                "deformable attention needs positive heads, points and levels".into(),
            ));
        }
        if dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "value width {dim} not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }

    pub fn samples_per_query(&self) -> usize {
        self.heads * self.levels * self.points
    }
}

/// How the offset-head bias is drawn; the offset weight always starts at zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OffsetInit {
    /// `b ~ U[−s, s]`: samples start inside the central `s`-scaled band.
    Central { scale: f64 },
    /// First half of each head's points `U[−1.5, −0.5]`, second half `U[0.5, 1.5]`.
    Adjacent,
}

impl OffsetInit {
    pub fn bias<F: Float, R: Rng + ?Sized>(&self, cfg: &DeformAttnConfig, rng: &mut R) -> Result<Tensor<F>> {
        let mut b = Vec::with_capacity(cfg.samples_per_query());
        match *self {
            OffsetInit::Central { scale } => {
                for _ in 0..cfg.samples_per_query() {
                    b.push(F::of(rng.random_range(-scale..=scale)));
                }
            }
            OffsetInit::Adjacent => {
                if cfg.points % 2 != 0 {
                    return Err(Error::Config(format!(
                        "adjacent offset init needs an even number of points, got {}",
                        cfg.points
                    )));
                }
                for _ in 0..cfg.heads * cfg.levels {
                    for k in 0..cfg.points {
                        let v = if k < cfg.points / 2 {
                            rng.random_range(-1.5..=-0.5)
                        } else {
                            rng.random_range(0.5..=1.5)
                        };
                        b.push(F::of(v));
                    }
                }
            }
        }
        Tensor::new(vec![cfg.samples_per_query()], b)
    }
}

/// 1D multi-level deformable attention around `(center, width)` references.
#[derive(Clone, Debug)]
pub struct DeformableAttention {
    pub offsets: Linear,
    pub weights: Linear,
    pub value: Linear,
    pub out: Linear,
    pub cfg: DeformAttnConfig,
    pub dim: usize,
}

impl DeformableAttention {
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        cfg: DeformAttnConfig,
        init: OffsetInit,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(dim)?;
        let s = cfg.samples_per_query();
        let bias = init.bias(&cfg, rng)?;
        Ok(DeformableAttention {
            offsets: Linear::from_parts(store, &format!("{name}.offsets"), Tensor::zeros(&[s, dim]), Some(bias)),
            weights: Linear::zeros(store, &format!("{name}.weights"), dim, s),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            cfg,
            dim,
        })
    }

    /// Sampling positions `p = c + 0.5·d·Δp`, `[Nq, M·L·K]` ordered `(head, level, point)`.
    pub fn sampling_positions<F: Float>(&self, g: &mut Graph<F>, query: Var, refs: &Tensor<F>) -> Result<Var> {
        if refs.ndim() != 2 || refs.cols() != 2 || refs.rows() != g.shape(query)[0] {
            return Err(Error::ShapeMismatch {
                op: "deformable references",
                lhs: g.shape(query).to_vec(),
                rhs: refs.shape().to_vec(),
            });
        }
        let mut centers = Vec::with_capacity(refs.rows());
        let mut half_widths = Vec::with_capacity(refs.rows());
        for r in 0..refs.rows() {
            let d = refs.at(r, 1);
            if d <= F::zero() || !d.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "reference width must be positive, query {r} has {}",
                    d.to_f64().unwrap_or(f64::NAN)
                )));
            }
            centers.push(refs.at(r, 0));
            half_widths.push(F::of(0.5) * d);
        }
        let delta = self.offsets.forward(g, query)?;
        g.row_affine(delta, &half_widths, &centers)
    }

    /// Returns the layer output `[Nq, D]` and the sampling positions.
    pub fn forward<F: Float>(
        &self,
        g: &mut Graph<F>,
        query: Var,
        refs: &Tensor<F>,
        levels: &[Var],
    ) -> Result<(Var, Var)> {
        if levels.len() != self.cfg.levels {
            return Err(Error::InvalidArgument(format!(
                "deformable attention configured for {} levels, got {}",
                self.cfg.levels,
                levels.len()
            )));
        }
        let pos = self.sampling_positions(g, query, refs)?;
        let nq = g.shape(query)[0];
        let (m, lk) = (self.cfg.heads, self.cfg.levels * self.cfg.points);
        let logits = self.weights.forward(g, query)?;
        let logits = g.reshape(logits, &[nq * m, lk])?;
        let attn = g.softmax(logits);
        let attn = g.reshape(attn, &[nq, m * lk])?;
        let values = levels
            .iter()
            .map(|&v| self.value.forward(g, v))
            .collect::<Result<Vec<_>>>()?;
        let agg = g.deform_aggregate(&values, pos, attn, m, self.cfg.points)?;
        Ok((self.out.forward(g, agg)?, pos))
    }
}
