use candle_core::{DType, Device, Tensor};

use super::ModelConfig;
use crate::nn::{
    bilinear_matrix, gelu, Attention, Dense, Init, LayerNorm, Mlp, NnError, ParamInit, Result,
};

#[derive(Debug, Clone)]
struct TwoWayBlock {
    self_attn: Attention,
    norm1: LayerNorm,
    cross_token_to_image: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    cross_image_to_token: Attention,
    norm4: LayerNorm,
    skip_first_layer_pe: bool,
}

impl TwoWayBlock {
    fn new(pi: &mut ParamInit, name: &str, cfg: &ModelConfig, skip_pe: bool) -> Result<Self> {
        let (c, h) = (cfg.embed_dim, cfg.decoder_heads);
        Ok(Self {
            self_attn: Attention::new(pi, &format!("{name}.self_attn"), c, h, true)?,
            norm1: LayerNorm::new(pi, &format!("{name}.norm1"), c, true)?,
            cross_token_to_image: Attention::new(pi, &format!("{name}.cross_t2i"), c, h, true)?,
            norm2: LayerNorm::new(pi, &format!("{name}.norm2"), c, true)?,
            mlp: Mlp::new(pi, &format!("{name}.mlp"), (c, cfg.decoder_mlp_dim, c), true)?,
            norm3: LayerNorm::new(pi, &format!("{name}.norm3"), c, true)?,
            cross_image_to_token: Attention::new(pi, &format!("{name}.cross_i2t"), c, h, true)?,
            norm4: LayerNorm::new(pi, &format!("{name}.norm4"), c, true)?,
            skip_first_layer_pe: skip_pe,
        })
    }

    fn forward(
        &self,
        queries: &Tensor,
        keys: &Tensor,
        query_pe: &Tensor,
        key_pe: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let queries = if self.skip_first_layer_pe {
            self.self_attn.forward(queries, queries, queries)?
        } else {
            let q = (queries + query_pe)?;
            (queries + self.self_attn.forward(&q, &q, queries)?)?
        };
        let queries = self.norm1.forward(&queries)?;

        let q = (&queries + query_pe)?;
        let k = keys.broadcast_add(key_pe)?;
        let queries = (&queries + self.cross_token_to_image.forward(&q, &k, keys)?)?;
        let queries = self.norm2.forward(&queries)?;

        let queries = (&queries + self.mlp.forward(&queries)?)?;
        let queries = self.norm3.forward(&queries)?;

        let q = (&queries + query_pe)?;
        let keys = (keys + self.cross_image_to_token.forward(&k, &q, &queries)?)?;
        let keys = self.norm4.forward(&keys)?;
        Ok((queries, keys))
    }
}

/// Fixed 2-D sinusoidal encoding, `(1, grid*grid, dim)`.
fn sinusoidal_pe(grid: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let quarter = dim / 4;
    let mut data = vec![0.0f64; grid * grid * dim];
    for y in 0..grid {
        for x in 0..grid {
            let row = &mut data[(y * grid + x) * dim..(y * grid + x + 1) * dim];
            for i in 0..quarter {
                let freq = 1.0 / 10_000f64.powf(i as f64 / quarter as f64);
                row[i] = (x as f64 * freq).sin();
                row[quarter + i] = (x as f64 * freq).cos();
                row[2 * quarter + i] = (y as f64 * freq).sin();
                row[3 * quarter + i] = (y as f64 * freq).cos();
            }
        }
    }
    Ok(Tensor::from_vec(data, (1, grid * grid, dim), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
struct UpscaleStage {
    proj: Dense,
    norm: Option<LayerNorm>,
    out_channels: usize,
}

impl UpscaleStage {
    /// 2x upsampling as a per-token linear map followed by pixel shuffle,
    /// i.e. a stride-2, kernel-2 transposed convolution.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = x.dims4()?;
        let c = self.out_channels;
        let y = self
            .proj
            .forward(x)?
            .reshape(vec![b, h, w, 2, 2, c])?
            .permute(vec![0, 1, 3, 2, 4, 5])?
            .contiguous()?
            .reshape((b, 2 * h, 2 * w, c))?;
        let y = match &self.norm {
            Some(n) => n.forward(&y)?,
            None => y,
        };
        gelu(&y)
    }
}

/// Lightweight promptable mask decoder. The projected knowledge guidance
/// enters twice: as a prompt token next to the learned mask token, and added
/// to every image token.
#[derive(Debug, Clone)]
pub struct MaskDecoder {
    embed_dim: usize,
    grid: usize,
    image_size: usize,
    mask_token: Tensor,
    blocks: Vec<TwoWayBlock>,
    final_attn: Attention,
    norm_final: LayerNorm,
    upscale: Vec<UpscaleStage>,
    hyper: Mlp,
    image_pe: Tensor,
    resize_rows: Tensor,
    resize_cols_t: Tensor,
}

impl MaskDecoder {
    pub fn new(pi: &mut ParamInit, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.embed_dim;
        let mut blocks = Vec::with_capacity(cfg.decoder_depth);
        for i in 0..cfg.decoder_depth {
            blocks.push(TwoWayBlock::new(pi, &format!("decoder.blocks.{i}"), cfg, i == 0)?);
        }
        let mut upscale = Vec::with_capacity(cfg.upscale_stages);
        let mut channels = c;
        for i in 0..cfg.upscale_stages {
            let out = (channels / if i == 0 { 4 } else { 2 }).max(1);
            upscale.push(UpscaleStage {
                proj: Dense::fan_in(pi, &format!("decoder.upscale.{i}.proj"), channels, 4 * out, true)?,
                norm: if i + 1 < cfg.upscale_stages {
                    Some(LayerNorm::new(pi, &format!("decoder.upscale.{i}.norm"), out, true)?)
                } else {
                    None
                },
                out_channels: out,
            });
            channels = out;
        }
        let low_res = cfg.grid() << cfg.upscale_stages;
        let s = cfg.image_size;
        let (dtype, device) = (pi.dtype(), pi.device().clone());
        let rows = Tensor::from_vec(bilinear_matrix(s, low_res), (s, low_res), &device)?
            .to_dtype(dtype)?;
        Ok(Self {
            embed_dim: c,
            grid: cfg.grid(),
            image_size: s,
            mask_token: pi.tensor("decoder.mask_token", &[1, 1, c], Init::Normal(1.0), true)?,
            blocks,
            final_attn: Attention::new(pi, "decoder.final_attn", c, cfg.decoder_heads, true)?,
            norm_final: LayerNorm::new(pi, "decoder.norm_final", c, true)?,
            upscale,
            hyper: Mlp::new(pi, "decoder.hyper", (c, c, channels), true)?,
            image_pe: sinusoidal_pe(cfg.grid(), c, dtype, &device)?,
            resize_cols_t: rows.t()?.contiguous()?,
            resize_rows: rows,
        })
    }

    /// Mask logits at model resolution, `(batch, S, S)`.
    pub fn forward(&self, embedding: &Tensor, guidance: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = embedding.dims4()?;
        if c != self.embed_dim || h != self.grid || w != self.grid {
            return Err(NnError::Shape(format!(
                "embedding {:?} does not match decoder ({}, {}, {})",
                embedding.dims(),
                self.embed_dim,
                self.grid,
                self.grid
            )));
        }
        if guidance.dims() != [b, c] {
            return Err(NnError::Validation(format!(
                "guidance shape {:?}, expected [{b}, {c}]",
                guidance.dims()
            )));
        }
        let prompt = guidance.unsqueeze(1)?;
        let src = embedding
            .flatten_from(2)?
            .transpose(1, 2)?
            .contiguous()?
            .broadcast_add(&prompt)?;
        let tokens = Tensor::cat(&[&self.mask_token.broadcast_as((b, 1, c))?, &prompt], 1)?;

        let mut queries = tokens.clone();
        let mut keys = src;
        for block in &self.blocks {
            (queries, keys) = block.forward(&queries, &keys, &tokens, &self.image_pe)?;
        }
        let q = (&queries + &tokens)?;
        let k = keys.broadcast_add(&self.image_pe)?;
        let queries = self
            .norm_final
            .forward(&(&queries + self.final_attn.forward(&q, &k, &keys)?)?)?;

        let mut up = keys.reshape((b, h, w, c))?;
        for stage in &self.upscale {
            up = stage.forward(&up)?;
        }
        let (_, uh, uw, uc) = up.dims4()?;
        let hyper = self.hyper.forward(&queries.narrow(1, 0, 1)?)?; // (b, 1, uc)
        let low = up
            .reshape((b, uh * uw, uc))?
            .matmul(&hyper.transpose(1, 2)?.contiguous()?)?
            .reshape((b, uh, uw))?;
        let logits = self
            .resize_rows
            .broadcast_matmul(&low)?
            .broadcast_matmul(&self.resize_cols_t)?;
        debug_assert_eq!(logits.dims(), &[b, self.image_size, self.image_size]);
        Ok(logits)
    }
}
