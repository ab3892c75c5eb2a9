//! Small neural-network toolkit on top of `candle-core`.
//!
//! Parameters live in a [`ParamStore`] under dotted names (`encoder.*`,
//! `decoder.*`, `lora.*`, `injector.*`). Frozen parameters are plain tensors
//! and never enter the autograd graph; trainable ones are [`candle_core::Var`]s.

mod layers;
mod lora;
mod params;

pub use layers::{
    bilinear_matrix, gelu, sigmoid, softmax_last_dim, Attention, Dense, LayerNorm, Mlp,
    MultiHeadSelfAttention,
};
pub use lora::{AdaptedDense, LoraAdapter, LoraConfig};
pub use params::{Init, Param, ParamInit, ParamStore, Snapshot};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Validation(String),
}

pub type Result<T> = std::result::Result<T, NnError>;
