//! End-to-end training of decoder, injector and LoRA adapters with BCE and
//! SGD (momentum) under a cosine learning-rate schedule.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write;

use candle_core::{backprop::GradStore, DType, Tensor, Var};
use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::CamouflagedSample;
use crate::injector::{KnowledgeSelection, KnowledgeTensors};
use crate::knowledge::{CacheError, KnowledgeCache};
use crate::model::{preprocess, resize_mask};
use crate::nn::{sigmoid, ParamStore};
use crate::pipeline::{Pipeline, PipelineError};
use crate::text_encoder::{EncodedKnowledge, TextEncoder, TextEncoderError};

pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training input: {0}")]
    Validation(String),
    #[error("no cached knowledge for ({class}, {image_id})")]
    CacheMiss { class: String, image_id: String },
    #[error(transparent)]
    TextEncoder(#[from] TextEncoderError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

impl From<crate::nn::NnError> for TrainError {
    fn from(e: crate::nn::NnError) -> Self {
        TrainError::Pipeline(e.into())
    }
}

impl From<crate::injector::InjectorError> for TrainError {
    fn from(e: crate::injector::InjectorError) -> Self {
        TrainError::Pipeline(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub momentum: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub selection: KnowledgeSelection,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 5e-3,
            momentum: 0.9,
            total_steps: 300,
            batch_size: 2,
            seed: 0,
            selection: KnowledgeSelection::All,
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(TrainError::Validation(format!("initial_lr must be > 0, got {}", self.initial_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Validation(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.total_steps == 0 {
            return Err(TrainError::Validation("total_steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Validation("batch_size must be at least 1".into()));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(TrainError::Validation(format!("max_grad_norm must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

/// Mean binary cross-entropy with probabilities clamped to `[ε, 1−ε]`.
pub fn bce_loss(probabilities: ArrayView2<f64>, target: ArrayView2<bool>) -> Result<f64> {
    if probabilities.dim() != target.dim() {
        return Err(TrainError::Validation(format!(
            "probabilities {:?} vs target {:?}",
            probabilities.dim(),
            target.dim()
        )));
    }
    if probabilities.is_empty() {
        return Err(TrainError::Validation("empty grids".into()));
    }
    let sum: f64 = probabilities
        .iter()
        .zip(target.iter())
        .map(|(&p, &g)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            if g {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / probabilities.len() as f64)
}

/// Differentiable BCE on logits against a 0/1 target of the same shape.
pub fn bce_loss_tensor(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    if logits.dims() != target.dims() {
        return Err(TrainError::Validation(format!(
            "logits {:?} vs target {:?}",
            logits.dims(),
            target.dims()
        )));
    }
    let p = sigmoid(logits)?.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let pos = (target * p.log()?)?;
    let neg = ((1.0 - target)? * (1.0 - p)?.log()?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

/// `0.5·lr₀·(1 + cos(π·t/T))` for `0 ≤ t ≤ T`.
pub fn cosine_lr(step: usize, config: &TrainConfig) -> Result<f64> {
    let t_max = config.total_steps;
    if step > t_max {
        return Err(TrainError::Validation(format!("step {step} beyond total_steps {t_max}")));
    }
    if step == t_max {
        return Ok(0.0);
    }
    Ok(0.5 * config.initial_lr * (1.0 + (PI * step as f64 / t_max as f64).cos()))
}

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `p ← p − lr·v`.
pub struct Sgd {
    momentum: f64,
    max_grad_norm: Option<f64>,
    vars: Vec<(String, Var)>,
    velocity: HashMap<String, Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64) -> Self {
        Self {
            momentum,
            max_grad_norm: None,
            vars: store.trainable().map(|(k, v)| (k.clone(), v.clone())).collect(),
            velocity: HashMap::new(),
        }
    }

    pub fn with_max_grad_norm(mut self, max_norm: Option<f64>) -> Self {
        self.max_grad_norm = max_norm;
        self
    }

    /// Global L2 norm of the gradients of the trainable parameters.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for (_, var) in &self.vars {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        let scale = match self.max_grad_norm {
            Some(max) => {
                let norm = self.grad_norm(grads)?;
                (max / (norm + 1e-6)).min(1.0)
            }
            None => 1.0,
        };
        for (name, var) in &self.vars {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let scaled;
            let g = if scale < 1.0 {
                scaled = (g * scale)?;
                &scaled
            } else {
                g
            };
            let v = match self.velocity.get(name) {
                Some(prev) if self.momentum > 0.0 => ((prev * self.momentum)? + g)?,
                _ => g.clone(),
            };
            var.set(&(var.as_tensor() - (&v * lr)?)?)?;
            self.velocity.insert(name.clone(), v);
        }
        Ok(())
    }
}

/// One sample ready for the training loop.
pub struct TrainingExample {
    pub image_id: String,
    pub class_name: String,
    /// `(3, S, S)` normalized photo.
    pub input: Tensor,
    /// `(S, S)` nearest-neighbour resized mask as 0/1.
    pub target: Tensor,
    pub knowledge: EncodedKnowledge,
}

/// Looks up and encodes each sample's knowledge and resizes photo and mask
/// to the model resolution.
pub fn prepare_examples(
    samples: &[CamouflagedSample],
    cache: &KnowledgeCache,
    text_encoder: &TextEncoder,
    pipeline: &Pipeline,
) -> Result<Vec<TrainingExample>> {
    let size = pipeline.config().model.image_size;
    let device = pipeline.device();
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let bundle = cache.load(&s.t_ref, &s.image_id).map_err(|e| match e {
            CacheError::NotFound { .. } | CacheError::Incomplete(_) => TrainError::CacheMiss {
                class: s.t_ref.clone(),
                image_id: s.image_id.clone(),
            },
            other => TrainError::Validation(other.to_string()),
        })?;
        let knowledge = text_encoder.encode_bundle(&bundle)?;
        out.push(TrainingExample {
            image_id: s.image_id.clone(),
            class_name: s.t_ref.clone(),
            input: preprocess(&s.photo, size, DType::F32, device)?,
            target: Tensor::from_vec(resize_mask(&s.gt_mask, size), (size, size), device)?
                .to_dtype(DType::F32)?,
            knowledge,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub trace: Vec<StepRecord>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.trace.last().map(|r| r.loss)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,lr,loss")?;
        for r in &self.trace {
            writeln!(w, "{},{},{}", r.step, r.lr, r.loss)?;
        }
        Ok(())
    }
}

/// Batches (stacked inputs, targets and knowledge) for one step.
pub fn make_batch(
    examples: &[&TrainingExample],
    pipeline: &Pipeline,
) -> Result<(Tensor, Tensor, KnowledgeTensors)> {
    let inputs: Vec<&Tensor> = examples.iter().map(|e| &e.input).collect();
    let targets: Vec<&Tensor> = examples.iter().map(|e| &e.target).collect();
    let knowledge: Vec<&EncodedKnowledge> = examples.iter().map(|e| &e.knowledge).collect();
    Ok((
        Tensor::stack(&inputs, 0)?,
        Tensor::stack(&targets, 0)?,
        KnowledgeTensors::from_encoded(&knowledge, DType::F32, pipeline.device())?,
    ))
}

/// Runs `total_steps` SGD steps. Each epoch visits the examples in a
/// seeded shuffled order; the loss is recorded before each update.
pub fn train(pipeline: &Pipeline, examples: &[TrainingExample], config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if examples.is_empty() {
        return Err(TrainError::Validation("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut sgd = Sgd::new(&pipeline.store, config.momentum).with_max_grad_norm(config.max_grad_norm);
    let mut report = TrainReport::default();
    for step in 0..config.total_steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(examples.len()) {
            if order.is_empty() {
                order = (0..examples.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            batch.push(&examples[order.pop().unwrap()]);
        }
        let (x, y, k) = make_batch(&batch, pipeline)?;
        let logits = pipeline.forward_logits(&x, &k, config.selection)?;
        let loss = bce_loss_tensor(&logits, &y)?;
        let loss_value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !loss_value.is_finite() {
            return Err(TrainError::Validation(format!("non-finite loss at step {step}")));
        }
        let lr = cosine_lr(step, config)?;
        let grads = loss.backward()?;
        sgd.step(&grads, lr)?;
        log::debug!("step {step} lr {lr:.3e} loss {loss_value:.5}");
        report.trace.push(StepRecord {
            step,
            lr,
            loss: loss_value,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use ndarray::array;

    #[test]
    fn bce_examples() {
        let p = array![[0.9, 0.1], [0.8, 0.2]];
        let g = array![[true, false], [true, false]];
        let expect = (-(0.9f64.ln()) * 2.0 - 0.8f64.ln() * 2.0) / 4.0;
        let l = bce_loss(p.view(), g.view()).unwrap();
        assert!((l - expect).abs() < 1e-15);
        assert!((l - 0.1643).abs() < 1e-4);

        let half = array![[0.5, 0.5], [0.5, 0.5]];
        assert!((bce_loss(half.view(), g.view()).unwrap() - 2f64.ln()).abs() < 1e-15);

        let exact = g.mapv(|b| if b { 1.0 } else { 0.0 });
        let l = bce_loss(exact.view(), g.view()).unwrap();
        assert!(l > 0.0 && l <= 1.2e-6);

        let wrong = array![[0.5, 0.5]];
        assert!(bce_loss(wrong.view(), g.view()).is_err());
    }

    #[test]
    fn tensor_bce_matches_scalar_version() {
        let dev = Device::Cpu;
        let logits = Tensor::new(&[[2.0f64, -1.0], [0.3, -4.0]], &dev).unwrap();
        let target = Tensor::new(&[[1.0f64, 0.0], [0.0, 1.0]], &dev).unwrap();
        let l = bce_loss_tensor(&logits, &target).unwrap().to_scalar::<f64>().unwrap();
        let p = ndarray::Array2::from_shape_vec((2, 2), vec![2.0f64, -1.0, 0.3, -4.0])
            .unwrap()
            .mapv(|z| 1.0 / (1.0 + (-z).exp()));
        let g = array![[true, false], [false, true]];
        assert!((l - bce_loss(p.view(), g.view()).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn schedule_boundaries() {
        let cfg = TrainConfig {
            total_steps: 1000,
            ..TrainConfig::default()
        };
        assert_eq!(cosine_lr(0, &cfg).unwrap(), 5e-3);
        assert_eq!(cosine_lr(1000, &cfg).unwrap(), 0.0);
        assert!((cosine_lr(500, &cfg).unwrap() - 2.5e-3).abs() < 1e-18);
        assert!(cosine_lr(1001, &cfg).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            TrainConfig { initial_lr: 0.0, ..TrainConfig::default() },
            TrainConfig { momentum: 1.0, ..TrainConfig::default() },
            TrainConfig { total_steps: 0, ..TrainConfig::default() },
            TrainConfig { max_grad_norm: Some(0.0), ..TrainConfig::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn plain_sgd_step_is_bounded_by_lr_times_gradient() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new();
        let w = {
            let mut pi = crate::nn::ParamInit::new(&mut store, 4, DType::F64, &dev);
            pi.tensor("decoder.w", &[3], crate::nn::Init::Normal(1.0), true).unwrap()
        };
        let before = w.to_vec1::<f64>().unwrap();
        let x = Tensor::new(&[1.0f64, -2.0, 3.0], &dev).unwrap();
        let loss = (&w * &x).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(&w).unwrap().to_vec1::<f64>().unwrap();
        let mut sgd = Sgd::new(&store, 0.0);
        let lr = 1e-8;
        sgd.step(&grads, lr).unwrap();
        let after = store.get("decoder.w").unwrap().tensor().to_vec1::<f64>().unwrap();
        for i in 0..3 {
            assert!((after[i] - before[i]).abs() <= lr * g[i].abs() * (1.0 + 1e-9));
            assert_ne!(after[i], before[i]);
        }
    }

    #[test]
    fn momentum_accumulates() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new();
        let w = {
            let mut pi = crate::nn::ParamInit::new(&mut store, 4, DType::F64, &dev);
            pi.tensor("p", &[1], crate::nn::Init::Zeros, true).unwrap()
        };
        let mut sgd = Sgd::new(&store, 0.5);
        // Gradient of sum(w) is 1 every step: v = 1, 1.5, 1.75.
        for _ in 0..3 {
            let grads = w.sum_all().unwrap().backward().unwrap();
            sgd.step(&grads, 1.0).unwrap();
        }
        let v = store.get("p").unwrap().tensor().to_vec1::<f64>().unwrap();
        assert!((v[0] + 4.25).abs() < 1e-12);
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new();
        let w = {
            let mut pi = crate::nn::ParamInit::new(&mut store, 4, DType::F64, &dev);
            pi.tensor("p", &[2], crate::nn::Init::Zeros, true).unwrap()
        };
        let x = Tensor::new(&[3.0f64, 4.0], &dev).unwrap();
        let grads = (&w * &x).unwrap().sum_all().unwrap().backward().unwrap();
        let mut sgd = Sgd::new(&store, 0.0).with_max_grad_norm(Some(1.0));
        assert!((sgd.grad_norm(&grads).unwrap() - 5.0).abs() < 1e-12);
        sgd.step(&grads, 1.0).unwrap();
        let v = store.get("p").unwrap().tensor().to_vec1::<f64>().unwrap();
        assert!((v[0] + 0.6).abs() < 1e-6 && (v[1] + 0.8).abs() < 1e-6, "{v:?}");

        // Below the threshold the step is untouched.
        let grads = (&w * &x).unwrap().sum_all().unwrap().backward().unwrap();
        let mut sgd = Sgd::new(&store, 0.0).with_max_grad_norm(Some(10.0));
        sgd.step(&grads, 1.0).unwrap();
        let v = store.get("p").unwrap().tensor().to_vec1::<f64>().unwrap();
        assert!((v[0] + 3.6).abs() < 1e-6 && (v[1] + 4.8).abs() < 1e-6, "{v:?}");
    }
}
