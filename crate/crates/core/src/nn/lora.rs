use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::Dense;
use super::params::{Init, ParamInit};
use super::{NnError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Regex matched against adaptable layer names, e.g. `encoder.blocks.0.attn.qkv`.
    pub target_pattern: String,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 4.0,
            target_pattern: r"attn\.(qkv|proj)$".to_string(),
        }
    }
}

/// Low-rank update `(alpha / r) * B * A` on a frozen affine layer.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    rank: usize,
    alpha: f64,
}

impl LoraAdapter {
    pub fn new(
        pi: &mut ParamInit,
        layer: &str,
        in_dim: usize,
        out_dim: usize,
        rank: usize,
        alpha: f64,
    ) -> Result<Self> {
        if rank == 0 || rank > in_dim.min(out_dim) {
            return Err(NnError::Config(format!(
                "LoRA rank {rank} invalid for `{layer}` ({out_dim}x{in_dim})"
            )));
        }
        let bound = 1.0 / (in_dim as f64).sqrt();
        let a = pi.tensor(&format!("lora.{layer}.a"), &[rank, in_dim], Init::Uniform(bound), true)?;
        let b = pi.tensor(&format!("lora.{layer}.b"), &[out_dim, rank], Init::Zeros, true)?;
        Ok(Self { a, b, rank, alpha })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn param_count(&self) -> usize {
        self.a.elem_count() + self.b.elem_count()
    }

    fn delta(&self, x2: &Tensor) -> Result<Tensor> {
        let low = x2.matmul(&self.a.t()?)?;
        Ok((low.matmul(&self.b.t()?)? * self.scaling())?)
    }
}

/// An affine layer that can carry a low-rank adapter.
#[derive(Debug, Clone)]
pub struct AdaptedDense {
    pub base: Dense,
    pub name: String,
    pub adapter: Option<LoraAdapter>,
}

impl AdaptedDense {
    pub fn new(base: Dense, name: String) -> Self {
        Self {
            base,
            name,
            adapter: None,
        }
    }

    pub fn attach(&mut self, pi: &mut ParamInit, rank: usize, alpha: f64) -> Result<&LoraAdapter> {
        let adapter = LoraAdapter::new(
            pi,
            &self.name,
            self.base.in_dim(),
            self.base.out_dim(),
            rank,
            alpha,
        )?;
        Ok(self.adapter.insert(adapter))
    }

    /// `use_adapter = false` evaluates the frozen base layer alone.
    pub fn forward(&self, x: &Tensor, use_adapter: bool) -> Result<Tensor> {
        let y = self.base.forward(x)?;
        match (&self.adapter, use_adapter) {
            (Some(lora), true) => {
                let dims = x.dims().to_vec();
                let in_dim = self.base.in_dim();
                let rows = x.elem_count() / in_dim;
                let delta = lora
                    .delta(&x.reshape((rows, in_dim))?)?
                    .reshape(y.dims())?;
                debug_assert_eq!(dims[..dims.len() - 1], y.dims()[..dims.len() - 1]);
                Ok((y + delta)?)
            }
            _ => Ok(y),
        }
    }
}
