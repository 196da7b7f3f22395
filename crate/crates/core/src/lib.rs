//! Temporal action detection with a multi-dilated gated encoder and a
//! central/adjacent deformable decoder, on a small reverse-mode autodiff engine.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod loss;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
