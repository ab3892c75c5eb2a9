//! Toy promptable segmentation model: a LoRA-adaptable ViT encoder and a
//! two-way transformer decoder that consumes a knowledge guidance vector.

mod decoder;
mod encoder;

pub use decoder::MaskDecoder;
pub use encoder::{ImageEncoder, LoraSummary};

use candle_core::{DType, Device, Tensor};
use image::imageops::{self, FilterType};
use image::{GrayImage, Luma, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::nn::{bilinear_matrix, sigmoid, LoraConfig, NnError, ParamInit, Result};

pub const PIXEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub embed_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub decoder_mlp_dim: usize,
    /// Number of 2x upscaling stages after the decoder.
    pub upscale_stages: usize,
    pub lora: LoraConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            patch_size: 16,
            width: 256,
            depth: 4,
            heads: 8,
            mlp_ratio: 4,
            embed_dim: 256,
            decoder_depth: 2,
            decoder_heads: 8,
            decoder_mlp_dim: 512,
            upscale_stages: 2,
            lora: LoraConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NnError::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.decoder_heads == 0 || self.embed_dim % self.decoder_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by {} decoder heads",
                self.embed_dim, self.decoder_heads
            ));
        }
        if self.embed_dim % 4 != 0 || self.embed_dim >> (self.upscale_stages + 1) == 0 {
            return bad(format!(
                "embed_dim {} too small for {} upscaling stages",
                self.embed_dim, self.upscale_stages
            ));
        }
        if self.depth == 0 || self.decoder_depth == 0 {
            return bad("encoder and decoder need at least one block".into());
        }
        Ok(())
    }
}

/// Resizes a photo to the model resolution and normalizes each channel,
/// giving a `(3, S, S)` tensor.
pub fn preprocess(photo: &RgbImage, size: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let s = size as u32;
    let resized;
    let img = if photo.dimensions() == (s, s) {
        photo
    } else {
        resized = imageops::resize(photo, s, s, FilterType::Triangle);
        &resized
    };
    let mut data = vec![0.0f64; 3 * size * size];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            let v = px.0[c] as f64 / 255.0;
            data[c * size * size + y as usize * size + x as usize] = (v - PIXEL_MEAN[c]) / PIXEL_STD[c];
        }
    }
    Ok(Tensor::from_vec(data, (3, size, size), device)?.to_dtype(dtype)?)
}

/// Nearest-neighbour resize of a binary mask to `size × size`, as 0/1
/// values in row-major order.
pub fn resize_mask(mask: &Array2<bool>, size: usize) -> Vec<f64> {
    let (h, w) = mask.dim();
    let src = |o: usize, n: usize| (((o as f64 + 0.5) * n as f64 / size as f64) as usize).min(n - 1);
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            out.push(f64::from(u8::from(mask[(src(r, h), src(c, w))])));
        }
    }
    out
}

/// A mask at the photo's original resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPrediction {
    pub height: usize,
    pub width: usize,
    /// Row-major, `height × width`.
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub binary: Vec<u8>,
}

impl MaskPrediction {
    /// Bilinearly resizes model-resolution logits to `height × width`, then
    /// applies the sigmoid and the 0.5 threshold.
    pub fn from_logits(logits: &Tensor, height: usize, width: usize) -> Result<Self> {
        let (h, w) = logits.dims2()?;
        let dev = logits.device();
        let ry = Tensor::from_vec(bilinear_matrix(height, h), (height, h), dev)?;
        let rx = Tensor::from_vec(bilinear_matrix(width, w), (width, w), dev)?;
        let full = ry
            .matmul(&logits.to_dtype(DType::F64)?)?
            .matmul(&rx.t()?)?;
        let probs = sigmoid(&full)?;
        let logits = full.flatten_all()?.to_vec1::<f64>()?;
        let probabilities = probs.flatten_all()?.to_vec1::<f64>()?;
        let binary = probabilities.iter().map(|&p| u8::from(p >= 0.5)).collect();
        Ok(Self {
            height,
            width,
            logits,
            probabilities,
            binary,
        })
    }

    /// Probabilities scaled to 8 bits.
    pub fn probability_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.probabilities[y as usize * self.width + x as usize];
            Luma([(p * 255.0).round().clamp(0.0, 255.0) as u8])
        })
    }

    pub fn binary_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([self.binary[y as usize * self.width + x as usize] * 255])
        })
    }
}

#[derive(Debug, Clone)]
pub struct SegmentationModel {
    config: ModelConfig,
    pub encoder: ImageEncoder,
    pub decoder: MaskDecoder,
    lora: Option<LoraSummary>,
}

impl SegmentationModel {
    /// Builds encoder and decoder. Adapters are attached separately.
    pub fn new(pi: &mut ParamInit, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let encoder = ImageEncoder::new(pi, &config)?;
        let decoder = MaskDecoder::new(pi, &config)?;
        Ok(Self {
            config,
            encoder,
            decoder,
            lora: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn attach_lora(&mut self, pi: &mut ParamInit) -> Result<&LoraSummary> {
        let summary = self.encoder.attach_lora(pi, &self.config.lora)?;
        Ok(self.lora.insert(summary))
    }

    pub fn lora(&self) -> Option<&LoraSummary> {
        self.lora.as_ref()
    }

    /// `(B, 3, S, S)` or `(3, S, S)` preprocessed input to `(B, C, h, w)`.
    pub fn encode_image(&self, x: &Tensor, adapters: bool) -> Result<Tensor> {
        let x = if x.rank() == 3 { x.unsqueeze(0)? } else { x.clone() };
        if x.rank() != 4 {
            return Err(NnError::Validation(format!("expected a 3x S x S photo, got {:?}", x.dims())));
        }
        self.encoder.forward(&x, adapters)
    }

    /// Logits at model resolution, `(B, S, S)`.
    pub fn decode_logits(&self, embedding: &Tensor, guidance: &Tensor) -> Result<Tensor> {
        self.decoder.forward(embedding, guidance)
    }

    /// Decodes a single embedding `(1, C, h, w)` and resizes to `height × width`.
    pub fn decode_mask(
        &self,
        embedding: &Tensor,
        guidance: &Tensor,
        height: usize,
        width: usize,
    ) -> Result<MaskPrediction> {
        let guidance = if guidance.rank() == 1 { guidance.unsqueeze(0)? } else { guidance.clone() };
        let logits = self.decode_logits(embedding, &guidance)?;
        if logits.dim(0)? != 1 {
            return Err(NnError::Validation("decode_mask takes a single embedding".into()));
        }
        MaskPrediction::from_logits(&logits.get(0)?, height, width)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 32,
            patch_size: 8,
            width: 32,
            depth: 1,
            heads: 4,
            mlp_ratio: 2,
            embed_dim: 32,
            decoder_depth: 1,
            decoder_heads: 4,
            decoder_mlp_dim: 32,
            upscale_stages: 2,
            lora: LoraConfig::default(),
        }
    }

    fn photo(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 7 % 256) as u8, (y * 3 % 256) as u8, ((x + y) % 256) as u8]))
    }

    #[test]
    fn default_embedding_shape() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new();
        let mut pi = ParamInit::new(&mut store, 0, DType::F32, &dev);
        let cfg = ModelConfig::default();
        let enc = ImageEncoder::new(&mut pi, &cfg).unwrap();
        let x = preprocess(&photo(300, 200), 256, DType::F32, &dev).unwrap();
        let e = enc.forward(&x.unsqueeze(0).unwrap(), false).unwrap();
        assert_eq!(e.dims(), &[1, 256, 16, 16]);
    }

    #[test]
    fn resize_back_matches_photo() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new();
        let mut pi = ParamInit::new(&mut store, 0, DType::F32, &dev);
        let m = SegmentationModel::new(&mut pi, tiny()).unwrap();
        let x = preprocess(&photo(51, 38), 32, DType::F32, &dev).unwrap();
        let e = m.encode_image(&x, false).unwrap();
        let g = Tensor::zeros((1, 32), DType::F32, &dev).unwrap();
        let p = m.decode_mask(&e, &g, 38, 51).unwrap();
        assert_eq!((p.height, p.width), (38, 51));
        assert_eq!(p.probabilities.len(), 38 * 51);
        assert!(p.probabilities.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(p.binary.iter().all(|&b| b <= 1));
    }

    #[test]
    fn wrong_guidance_width_is_rejected() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new();
        let mut pi = ParamInit::new(&mut store, 0, DType::F32, &dev);
        let m = SegmentationModel::new(&mut pi, tiny()).unwrap();
        let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &dev).unwrap();
        let e = m.encode_image(&x, false).unwrap();
        let g = Tensor::zeros((1, 31), DType::F32, &dev).unwrap();
        assert!(matches!(m.decode_logits(&e, &g), Err(NnError::Validation(_))));
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new();
        let mut pi = ParamInit::new(&mut store, 0, DType::F32, &dev);
        let m = SegmentationModel::new(&mut pi, tiny()).unwrap();
        let x = Tensor::zeros((1, 4, 32, 32), DType::F32, &dev).unwrap();
        assert!(matches!(m.encode_image(&x, false), Err(NnError::Validation(_))));
    }

    #[test]
    fn fresh_adapters_leave_embedding_unchanged() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new();
        let mut pi = ParamInit::new(&mut store, 3, DType::F32, &dev);
        let mut m = SegmentationModel::new(&mut pi, tiny()).unwrap();
        let summary = m.attach_lora(&mut pi).unwrap().clone();
        assert_eq!(summary.layers.len(), 2);
        // qkv: 4*(32+96), proj: 4*(32+32)
        assert_eq!(summary.trainable_params, 4 * (32 + 96) + 4 * (32 + 32));
        let x = preprocess(&photo(32, 32), 32, DType::F32, &dev).unwrap();
        let a = m.encode_image(&x, false).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = m.encode_image(&x, true).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unmatched_lora_pattern_is_a_config_error() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new();
        let mut pi = ParamInit::new(&mut store, 3, DType::F32, &dev);
        let mut cfg = tiny();
        cfg.lora.target_pattern = "mlp\\.nothing$".into();
        let mut m = SegmentationModel::new(&mut pi, cfg).unwrap();
        assert!(matches!(m.attach_lora(&mut pi), Err(NnError::Config(_))));
    }

    #[test]
    fn guidance_changes_logits() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new();
        let mut pi = ParamInit::new(&mut store, 5, DType::F32, &dev);
        let m = SegmentationModel::new(&mut pi, tiny()).unwrap();
        let x = preprocess(&photo(32, 32), 32, DType::F32, &dev).unwrap();
        let e = m.encode_image(&x, false).unwrap();
        let g1 = Tensor::zeros((1, 32), DType::F32, &dev).unwrap();
        let g2 = Tensor::ones((1, 32), DType::F32, &dev).unwrap();
        let l1 = m.decode_logits(&e, &g1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let l2 = m.decode_logits(&e, &g2).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_ne!(l1, l2);
    }
}
