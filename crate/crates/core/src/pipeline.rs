//! The trainable system as one unit: segmentation model, knowledge injector
//! and their parameter store, with safetensors checkpoints.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::injector::{InjectorConfig, InjectorError, KnowledgeInjector, KnowledgeSelection, KnowledgeTensors};
use crate::model::{preprocess, MaskPrediction, ModelConfig, SegmentationModel};
use crate::nn::{NnError, ParamInit, ParamStore};
use crate::text_encoder::EncodedKnowledge;

pub const CHECKPOINT_FORMAT: &str = "mlkg-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Injector(#[from] InjectorError),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub injector: InjectorConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.injector.d_dec != self.model.embed_dim {
            return Err(PipelineError::Config(format!(
                "injector.d_dec ({}) must equal model.embed_dim ({})",
                self.injector.d_dec, self.model.embed_dim
            )));
        }
        Ok(())
    }
}

/// Header stored alongside the checkpoint tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub crate_version: String,
    pub config: PipelineConfig,
    pub selection: KnowledgeSelection,
    pub seed: u64,
    pub lora_layers: Vec<String>,
    pub shapes: std::collections::BTreeMap<String, Vec<usize>>,
    /// Caller-supplied run settings (for example the text encoder used).
    #[serde(default)]
    pub run: Option<serde_json::Value>,
}

pub struct Pipeline {
    pub store: ParamStore,
    pub model: SegmentationModel,
    pub injector: KnowledgeInjector,
    config: PipelineConfig,
    seed: u64,
    device: Device,
}

impl Pipeline {
    /// Seeded initialization with adapters attached; training runs in `f32`.
    pub fn new(config: PipelineConfig, seed: u64, device: &Device) -> Result<Self> {
        Self::build(config, seed, device, None)
    }

    fn build(
        config: PipelineConfig,
        seed: u64,
        device: &Device,
        loaded: Option<&HashMap<String, Tensor>>,
    ) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let (model, injector) = {
            let mut pi = ParamInit::new(&mut store, seed, DType::F32, device);
            if let Some(l) = loaded {
                pi = pi.with_loaded(l);
            }
            let mut model = SegmentationModel::new(&mut pi, config.model.clone())?;
            let injector = KnowledgeInjector::new(&mut pi, config.injector)?;
            model.attach_lora(&mut pi)?;
            (model, injector)
        };
        Ok(Self {
            store,
            model,
            injector,
            config,
            seed,
            device: device.clone(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Mask logits `(B, S, S)` for preprocessed images `(B, 3, S, S)`.
    pub fn forward_logits(
        &self,
        images: &Tensor,
        knowledge: &KnowledgeTensors,
        selection: KnowledgeSelection,
    ) -> Result<Tensor> {
        let embedding = self.model.encode_image(images, true)?;
        let guidance = self.injector.forward(knowledge, selection)?;
        Ok(self.model.decode_logits(&embedding, &guidance)?)
    }

    /// Full-resolution mask for one photo.
    pub fn predict(
        &self,
        photo: &RgbImage,
        knowledge: &EncodedKnowledge,
        selection: KnowledgeSelection,
    ) -> Result<MaskPrediction> {
        let size = self.config.model.image_size;
        let x = preprocess(photo, size, DType::F32, &self.device)?.unsqueeze(0)?;
        let k = KnowledgeTensors::from_encoded(&[knowledge], DType::F32, &self.device)?;
        let logits = self.forward_logits(&x, &k, selection)?;
        Ok(MaskPrediction::from_logits(
            &logits.get(0)?,
            photo.height() as usize,
            photo.width() as usize,
        )?)
    }

    /// Writes every parameter plus a JSON header, replacing `path` atomically.
    pub fn save(
        &self,
        path: &Path,
        selection: KnowledgeSelection,
        run: Option<serde_json::Value>,
    ) -> Result<()> {
        let ckpt_err = |msg: String| PipelineError::Checkpoint {
            path: path.display().to_string(),
            msg,
        };
        let tensors = self.store.tensors();
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").into(),
            config: self.config.clone(),
            selection,
            seed: self.seed,
            lora_layers: self.model.lora().map(|l| l.layers.clone()).unwrap_or_default(),
            shapes: tensors.iter().map(|(k, t)| (k.clone(), t.dims().to_vec())).collect(),
            run,
        };
        let header = HashMap::from([(
            "mlkg".to_string(),
            serde_json::to_string(&meta).map_err(|e| ckpt_err(e.to_string()))?,
        )]);
        let bytes = safetensors::serialize(tensors.iter().map(|(k, t)| (k.as_str(), t)), Some(header))
            .map_err(|e| ckpt_err(e.to_string()))?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir).map_err(|e| ckpt_err(e.to_string()))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| ckpt_err(e.to_string()))?;
        tmp.write_all(&bytes).map_err(|e| ckpt_err(e.to_string()))?;
        tmp.persist(path).map_err(|e| ckpt_err(e.to_string()))?;
        Ok(())
    }

    /// Reads a checkpoint written by [`Pipeline::save`].
    pub fn load(path: &Path, device: &Device) -> Result<(Self, CheckpointMeta)> {
        let ckpt_err = |msg: String| PipelineError::Checkpoint {
            path: path.display().to_string(),
            msg,
        };
        let bytes = std::fs::read(path).map_err(|e| ckpt_err(e.to_string()))?;
        let (_, st_meta) =
            safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(e.to_string()))?;
        let raw = st_meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get("mlkg"))
            .ok_or_else(|| ckpt_err("missing header".into()))?;
        let meta: CheckpointMeta = serde_json::from_str(raw).map_err(|e| ckpt_err(format!("bad header: {e}")))?;
        if meta.format != CHECKPOINT_FORMAT || meta.version != CHECKPOINT_VERSION {
            return Err(ckpt_err(format!(
                "unsupported format {} v{}",
                meta.format, meta.version
            )));
        }
        let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
        let pipeline = Self::build(meta.config.clone(), meta.seed, device, Some(&tensors))?;
        let expected = pipeline.store.len();
        if tensors.len() != expected {
            let missing: Vec<&String> = pipeline.store.iter().map(|(k, _)| k).filter(|k| !tensors.contains_key(*k)).collect();
            return Err(ckpt_err(format!(
                "{} tensors, expected {expected}; missing {missing:?}",
                tensors.len()
            )));
        }
        Ok((pipeline, meta))
    }
}
