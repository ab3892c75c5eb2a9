use candle_core::Tensor;
use regex::Regex;

use super::ModelConfig;
use crate::nn::{
    AdaptedDense, Dense, Init, LayerNorm, LoraConfig, Mlp, MultiHeadSelfAttention, NnError,
    ParamInit, Result,
};

#[derive(Debug, Clone)]
struct EncoderBlock {
    norm1: LayerNorm,
    attn: MultiHeadSelfAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl EncoderBlock {
    fn forward(&self, x: &Tensor, adapters: bool) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, adapters)?)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }
}

/// ViT image encoder. Every base parameter is frozen; only attached
/// low-rank adapters are trainable.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    patch_size: usize,
    grid: usize,
    width: usize,
    patch_embed: Dense,
    pos_embed: Tensor,
    blocks: Vec<EncoderBlock>,
    neck_norm: LayerNorm,
    neck_proj: Dense,
}

/// Summary of adapters attached by [`ImageEncoder::attach_lora`].
#[derive(Debug, Clone, PartialEq)]
pub struct LoraSummary {
    pub layers: Vec<String>,
    pub trainable_params: usize,
}

impl ImageEncoder {
    pub fn new(pi: &mut ParamInit, cfg: &ModelConfig) -> Result<Self> {
        let (p, w) = (cfg.patch_size, cfg.width);
        let grid = cfg.grid();
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let name = format!("encoder.blocks.{i}");
            blocks.push(EncoderBlock {
                norm1: LayerNorm::new(pi, &format!("{name}.norm1"), w, false)?,
                attn: MultiHeadSelfAttention::new(pi, &format!("{name}.attn"), w, cfg.heads, false)?,
                norm2: LayerNorm::new(pi, &format!("{name}.norm2"), w, false)?,
                mlp: Mlp::new(pi, &format!("{name}.mlp"), (w, w * cfg.mlp_ratio, w), false)?,
            });
        }
        Ok(Self {
            patch_size: p,
            grid,
            width: w,
            patch_embed: Dense::fan_in(pi, "encoder.patch_embed", 3 * p * p, w, false)?,
            pos_embed: pi.tensor("encoder.pos_embed", &[1, grid * grid, w], Init::TruncNormal(0.02), false)?,
            blocks,
            neck_norm: LayerNorm::new(pi, "encoder.neck.norm", w, false)?,
            neck_proj: Dense::fan_in(pi, "encoder.neck.proj", w, cfg.embed_dim, false)?,
        })
    }

    fn adaptable_layers(&mut self) -> Vec<&mut AdaptedDense> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.attn.qkv, &mut b.attn.proj])
            .collect()
    }

    /// Names of the layers that can carry adapters.
    pub fn adaptable_layer_names(&self) -> Vec<String> {
        self.blocks
            .iter()
            .flat_map(|b| [b.attn.qkv.name.clone(), b.attn.proj.name.clone()])
            .collect()
    }

    /// Adds a fresh adapter (B = 0) to every layer whose name matches the pattern.
    pub fn attach_lora(&mut self, pi: &mut ParamInit, cfg: &LoraConfig) -> Result<LoraSummary> {
        let re = Regex::new(&cfg.target_pattern)
            .map_err(|e| NnError::Config(format!("bad LoRA target pattern: {e}")))?;
        let mut summary = LoraSummary {
            layers: Vec::new(),
            trainable_params: 0,
        };
        for layer in self.adaptable_layers() {
            if re.is_match(&layer.name) {
                if layer.adapter.is_some() {
                    return Err(NnError::Config(format!("`{}` already has an adapter", layer.name)));
                }
                summary.trainable_params += layer.attach(pi, cfg.rank, cfg.alpha)?.param_count();
                summary.layers.push(layer.name.clone());
            }
        }
        if summary.layers.is_empty() {
            return Err(NnError::Config(format!(
                "LoRA pattern `{}` matches no encoder layer",
                cfg.target_pattern
            )));
        }
        Ok(summary)
    }

    /// `(batch, 3, S, S)` normalized photos to a `(batch, C, h, w)` embedding grid.
    pub fn forward(&self, x: &Tensor, adapters: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let s = self.grid * self.patch_size;
        if c != 3 {
            return Err(NnError::Validation(format!("expected 3 channels, got {c}")));
        }
        if h != s || w != s {
            return Err(NnError::Validation(format!(
                "expected {s}x{s} input, got {h}x{w}"
            )));
        }
        let (g, p) = (self.grid, self.patch_size);
        let patches = x
            .reshape((b, 3, g, p, g, p))?
            .permute(vec![0, 2, 4, 1, 3, 5])?
            .contiguous()?
            .reshape((b, g * g, 3 * p * p))?;
        let mut t = self.patch_embed.forward(&patches)?.broadcast_add(&self.pos_embed)?;
        for block in &self.blocks {
            t = block.forward(&t, adapters)?;
        }
        let t = self.neck_proj.forward(&self.neck_norm.forward(&t)?)?;
        let channels = t.dim(2)?;
        debug_assert_eq!(self.width, self.patch_embed.out_dim());
        Ok(t.transpose(1, 2)?.contiguous()?.reshape((b, channels, g, g))?)
    }
}
