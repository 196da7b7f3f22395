//! Layers built on the autodiff tape.

mod attention;
mod layers;
mod params;

pub use attention::{
    sample_linear, sine_position_encoding, DeformAttnConfig, DeformableAttention, MultiHeadSelfAttention,
    OffsetInit,
};
pub use layers::{xavier_uniform, Conv1d, LayerNorm, Linear};
pub use params::{check_param_gradients, Graph, ParamId, ParamStore};

#[cfg(test)]
mod tests;
