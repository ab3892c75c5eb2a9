//! Knowledge injector: selects and fuses the seven knowledge embeddings into a
//! single guidance vector, then projects it into the decoder's token space.
//!
//! For the full knowledge set:
//!
//! ```text
//! k_target = GELU(W_target · [k_a; k_b] + b_target)
//! λ        = softmax(<k_c,k_d>, <k_c,k_e>, <k_c,k_f>, <k_c,k_g>)
//! k_s      = λ_d k_d + λ_e k_e + λ_f k_f + λ_g k_g
//! k_scene  = GELU(W_scene · [k_s; k_c] + b_scene)
//! guidance = (k_target + k_scene) / 2
//! projected = W_out · GELU(W_hidden · guidance + b_hidden) + b_out
//! ```
//!
//! Single-level selections drop the other branch and return the remaining
//! branch output directly. With only `Ka` (or only `Kb`) selected, that vector
//! fills both halves of the target concatenation.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge::KnowledgeId;
use crate::nn::{gelu, Dense, Init, NnError, ParamInit};
use crate::text_encoder::EncodedKnowledge;

#[derive(Debug, Error)]
pub enum InjectorError {
    #[error("invalid injector input: {0}")]
    Validation(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl From<candle_core::Error> for InjectorError {
    fn from(e: candle_core::Error) -> Self {
        InjectorError::Nn(NnError::Candle(e))
    }
}

pub type Result<T> = std::result::Result<T, InjectorError>;

/// Supported knowledge configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnowledgeSelection {
    /// `{Ka}`: class-name template only.
    Ka,
    /// `{Kb}`: morphological description only.
    Kb,
    /// `{Kc..Kg}`: camouflage-scene level only.
    Scene,
    /// `{Ka..Kg}`: both levels.
    #[default]
    All,
}

impl KnowledgeSelection {
    pub const ALL: [KnowledgeSelection; 4] = [
        KnowledgeSelection::Ka,
        KnowledgeSelection::Kb,
        KnowledgeSelection::Scene,
        KnowledgeSelection::All,
    ];

    pub fn ids(self) -> BTreeSet<KnowledgeId> {
        match self {
            KnowledgeSelection::Ka => [KnowledgeId::Ka].into(),
            KnowledgeSelection::Kb => [KnowledgeId::Kb].into(),
            KnowledgeSelection::Scene => KnowledgeId::SCENE.into(),
            KnowledgeSelection::All => KnowledgeId::ALL.into(),
        }
    }

    pub fn from_ids(ids: &BTreeSet<KnowledgeId>) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| &s.ids() == ids)
            .ok_or_else(|| {
                let names: Vec<_> = ids.iter().map(|k| k.as_str()).collect();
                InjectorError::Validation(format!(
                    "unsupported knowledge selection {{{}}}; expected one of {{Ka}}, {{Kb}}, {{Kc..Kg}}, {{Ka..Kg}}",
                    names.join(",")
                ))
            })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            KnowledgeSelection::Ka => "ka",
            KnowledgeSelection::Kb => "kb",
            KnowledgeSelection::Scene => "scene",
            KnowledgeSelection::All => "all",
        }
    }

    fn uses_target(self) -> bool {
        !matches!(self, KnowledgeSelection::Scene)
    }

    fn uses_scene(self) -> bool {
        matches!(self, KnowledgeSelection::Scene | KnowledgeSelection::All)
    }
}

impl fmt::Display for KnowledgeSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KnowledgeSelection {
    type Err = InjectorError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|sel| sel.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                InjectorError::Validation(format!(
                    "unknown selection `{s}` (expected ka, kb, scene or all)"
                ))
            })
    }
}

/// Softmax weights over the colour, texture, shape and lighting knowledge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneWeights {
    pub lambda_d: f64,
    pub lambda_e: f64,
    pub lambda_f: f64,
    pub lambda_g: f64,
}

impl SceneWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.lambda_d, self.lambda_e, self.lambda_f, self.lambda_g]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// λ = softmax of the dot products between `k_c` and each of `k_d..k_g`.
pub fn compute_scene_weights(k_c: &[f64], scene: [&[f64]; 4]) -> Result<SceneWeights> {
    for (i, v) in std::iter::once(k_c).chain(scene).enumerate() {
        if v.len() != k_c.len() {
            return Err(InjectorError::Validation(format!(
                "scene vector {i} has width {}, expected {}",
                v.len(),
                k_c.len()
            )));
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(InjectorError::Validation(format!(
                "scene vector {i} has non-finite entries"
            )));
        }
    }
    let affinities = scene.map(|k| dot(k_c, k));
    let max = affinities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps = affinities.map(|a| (a - max).exp());
    let sum: f64 = exps.iter().sum();
    let [d, e, f, g] = exps.map(|x| x / sum);
    Ok(SceneWeights {
        lambda_d: d,
        lambda_e: e,
        lambda_f: f,
        lambda_g: g,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InjectorConfig {
    /// Width of each knowledge embedding.
    pub d_text: usize,
    /// Hidden width of the projection MLP.
    pub d_proj: usize,
    /// Decoder token width.
    pub d_dec: usize,
}

impl Default for InjectorConfig {
    fn default() -> Self {
        Self {
            d_text: 512,
            d_proj: 512,
            d_dec: 256,
        }
    }
}

impl InjectorConfig {
    /// Width of the fused guidance before projection.
    pub fn d_fused(&self) -> usize {
        2 * self.d_text
    }
}

/// Knowledge embeddings for a batch, one `(batch, d_text)` tensor per id.
#[derive(Debug, Clone)]
pub struct KnowledgeTensors {
    vectors: Vec<Tensor>,
}

impl KnowledgeTensors {
    pub fn new(vectors: [Tensor; 7]) -> Result<Self> {
        let dims = vectors[0].dims().to_vec();
        if dims.len() != 2 || vectors.iter().any(|v| v.dims() != dims.as_slice()) {
            return Err(InjectorError::Validation(
                "knowledge tensors must all be (batch, d_text)".into(),
            ));
        }
        Ok(Self {
            vectors: vectors.into(),
        })
    }

    pub fn from_encoded(batch: &[&EncodedKnowledge], dtype: DType, device: &Device) -> Result<Self> {
        if batch.is_empty() {
            return Err(InjectorError::Validation("empty knowledge batch".into()));
        }
        let d = batch[0].dim();
        let tensors = KnowledgeId::ALL.map(|id| {
            let flat: Vec<f64> = batch.iter().flat_map(|e| e.get(id).iter().copied()).collect();
            Tensor::from_vec(flat, (batch.len(), d), device).and_then(|t| t.to_dtype(dtype))
        });
        let mut out = Vec::with_capacity(7);
        for t in tensors {
            out.push(t?);
        }
        if batch.iter().any(|e| e.vectors.values().any(|v| v.len() != d)) {
            return Err(InjectorError::Validation("ragged knowledge widths".into()));
        }
        Ok(Self { vectors: out })
    }

    pub fn get(&self, id: KnowledgeId) -> &Tensor {
        &self.vectors[id.index()]
    }

    pub fn batch_size(&self) -> usize {
        self.vectors[0].dims()[0]
    }

    pub fn width(&self) -> usize {
        self.vectors[0].dims()[1]
    }
}

/// Fused guidance plus the intermediates that produced it.
#[derive(Debug, Clone)]
pub struct Fusion {
    /// `(batch, 4)` softmax weights, when the scene branch is active.
    pub scene_weights: Option<Tensor>,
    pub k_s: Option<Tensor>,
    pub k_target: Option<Tensor>,
    pub k_scene: Option<Tensor>,
    /// `(batch, 2 * d_text)` guidance before projection.
    pub guidance: Tensor,
}

#[derive(Debug, Clone)]
pub struct KnowledgeInjector {
    config: InjectorConfig,
    target_fc: Dense,
    scene_fc: Dense,
    proj_hidden: Dense,
    proj_out: Dense,
}

impl KnowledgeInjector {
    /// Truncated-normal (σ = 0.02) weights and zero biases, all trainable.
    pub fn new(pi: &mut ParamInit, config: InjectorConfig) -> Result<Self> {
        Self::with_init(pi, config, Init::TruncNormal(0.02), Init::Zeros)
    }

    pub fn with_init(
        pi: &mut ParamInit,
        config: InjectorConfig,
        weight: Init,
        bias: Init,
    ) -> Result<Self> {
        if config.d_text == 0 || config.d_proj == 0 || config.d_dec == 0 {
            return Err(InjectorError::Validation("injector widths must be positive".into()));
        }
        let fused = config.d_fused();
        let mut dense = |name: &str, i, o| {
            Dense::new(pi, &format!("injector.{name}"), i, o, weight, Some(bias), true)
        };
        Ok(Self {
            target_fc: dense("target_fc", fused, fused)?,
            scene_fc: dense("scene_fc", fused, fused)?,
            proj_hidden: dense("proj.hidden", fused, config.d_proj)?,
            proj_out: dense("proj.out", config.d_proj, config.d_dec)?,
            config,
        })
    }

    pub fn config(&self) -> &InjectorConfig {
        &self.config
    }

    /// Batched λ: `(batch, 4)`.
    pub fn scene_weights(&self, k: &KnowledgeTensors) -> Result<Tensor> {
        let kc = k.get(KnowledgeId::Kc);
        let aff = [KnowledgeId::Kd, KnowledgeId::Ke, KnowledgeId::Kf, KnowledgeId::Kg]
            .iter()
            .map(|id| (kc * k.get(*id))?.sum_keepdim(1))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let aff = Tensor::cat(&aff, 1)?;
        Ok(crate::nn::softmax_last_dim(&aff)?)
    }

    pub fn fuse(&self, k: &KnowledgeTensors, selection: KnowledgeSelection) -> Result<Fusion> {
        if k.width() != self.config.d_text {
            return Err(InjectorError::Validation(format!(
                "knowledge width {} does not match injector d_text {}",
                k.width(),
                self.config.d_text
            )));
        }
        let k_target = if selection.uses_target() {
            let (first, second) = match selection {
                KnowledgeSelection::Ka => (KnowledgeId::Ka, KnowledgeId::Ka),
                KnowledgeSelection::Kb => (KnowledgeId::Kb, KnowledgeId::Kb),
                _ => (KnowledgeId::Ka, KnowledgeId::Kb),
            };
            let cat = Tensor::cat(&[k.get(first), k.get(second)], 1)?;
            Some(gelu(&self.target_fc.forward(&cat)?)?)
        } else {
            None
        };
        let (scene_weights, k_s, k_scene) = if selection.uses_scene() {
            let w = self.scene_weights(k)?;
            let mut k_s: Option<Tensor> = None;
            for (i, id) in [KnowledgeId::Kd, KnowledgeId::Ke, KnowledgeId::Kf, KnowledgeId::Kg]
                .into_iter()
                .enumerate()
            {
                let term = w.narrow(1, i, 1)?.broadcast_mul(k.get(id))?;
                k_s = Some(match k_s {
                    Some(acc) => (acc + term)?,
                    None => term,
                });
            }
            let k_s = k_s.expect("four scene terms");
            let cat = Tensor::cat(&[&k_s, k.get(KnowledgeId::Kc)], 1)?;
            let k_scene = gelu(&self.scene_fc.forward(&cat)?)?;
            (Some(w), Some(k_s), Some(k_scene))
        } else {
            (None, None, None)
        };
        let guidance = match (&k_target, &k_scene) {
            (Some(t), Some(s)) => ((t + s)? / 2.0)?,
            (Some(t), None) => t.clone(),
            (None, Some(s)) => s.clone(),
            (None, None) => unreachable!("every selection activates a branch"),
        };
        Ok(Fusion {
            scene_weights,
            k_s,
            k_target,
            k_scene,
            guidance,
        })
    }

    /// Two-layer MLP into the decoder width; the output layer is linear.
    pub fn project(&self, guidance: &Tensor) -> Result<Tensor> {
        let width = guidance.dims().last().copied().unwrap_or(0);
        if width != self.config.d_fused() {
            return Err(InjectorError::Validation(format!(
                "guidance width {width}, expected {}",
                self.config.d_fused()
            )));
        }
        let hidden = gelu(&self.proj_hidden.forward(guidance)?)?;
        Ok(self.proj_out.forward(&hidden)?)
    }

    /// `fuse` followed by `project`.
    pub fn forward(&self, k: &KnowledgeTensors, selection: KnowledgeSelection) -> Result<Tensor> {
        let fusion = self.fuse(k, selection)?;
        self.project(&fusion.guidance)
    }
}
