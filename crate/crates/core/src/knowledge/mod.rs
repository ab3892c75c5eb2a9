//! Multi-level knowledge generation.
//!
//! Seven knowledge texts describe one (class, image) pair. Two of them are
//! camouflage-target level and depend only on the class name (`Ka`, `Kb`);
//! five are camouflage-scene level and are produced by prompting a multimodal
//! LLM with the photo attached (`Kc`..`Kg`).

mod backend;
mod cache;
mod prompts;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{
    image_digest, BackendError, HttpBackend, HttpBackendConfig, MllmBackend, Query, StubBackend,
};
pub use cache::{CacheError, ClassEntry, ImageEntry, KnowledgeCache, CACHE_VERSION};
pub use prompts::{render_prompt, PromptId, PromptTemplate};

/// Identifier of one knowledge text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum KnowledgeId {
    Ka,
    Kb,
    Kc,
    Kd,
    Ke,
    Kf,
    Kg,
}

impl KnowledgeId {
    pub const ALL: [KnowledgeId; 7] = [
        KnowledgeId::Ka,
        KnowledgeId::Kb,
        KnowledgeId::Kc,
        KnowledgeId::Kd,
        KnowledgeId::Ke,
        KnowledgeId::Kf,
        KnowledgeId::Kg,
    ];

    /// Scene-level ids, in prompt order (global scene, colour, texture, shape, lighting).
    pub const SCENE: [KnowledgeId; 5] = [
        KnowledgeId::Kc,
        KnowledgeId::Kd,
        KnowledgeId::Ke,
        KnowledgeId::Kf,
        KnowledgeId::Kg,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            KnowledgeId::Ka => "Ka",
            KnowledgeId::Kb => "Kb",
            KnowledgeId::Kc => "Kc",
            KnowledgeId::Kd => "Kd",
            KnowledgeId::Ke => "Ke",
            KnowledgeId::Kf => "Kf",
            KnowledgeId::Kg => "Kg",
        }
    }

    /// The prompt that produces this knowledge.
    pub fn prompt(self) -> PromptId {
        match self {
            KnowledgeId::Ka => PromptId::Ka,
            KnowledgeId::Kb => PromptId::P1,
            KnowledgeId::Kc => PromptId::P2,
            KnowledgeId::Kd => PromptId::P3,
            KnowledgeId::Ke => PromptId::P4,
            KnowledgeId::Kf => PromptId::P5,
            KnowledgeId::Kg => PromptId::P6,
        }
    }

    pub fn is_scene_level(self) -> bool {
        !matches!(self, KnowledgeId::Ka | KnowledgeId::Kb)
    }
}

impl fmt::Display for KnowledgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KnowledgeId {
    type Err = KnowledgeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        KnowledgeId::ALL
            .into_iter()
            .find(|id| id.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| KnowledgeError::Validation(format!("unknown knowledge id `{s}`")))
    }
}

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("invalid knowledge request: {0}")]
    Validation(String),
    #[error("backend failed on prompt {prompt} after {attempts} attempt(s): {source}")]
    Backend {
        prompt: PromptId,
        attempts: u32,
        #[source]
        source: BackendError,
    },
    #[error("incomplete bundle for ({class}, {image_id}): missing {missing}")]
    Incomplete {
        class: String,
        image_id: String,
        missing: KnowledgeId,
    },
}

impl KnowledgeError {
    /// Whether re-issuing the request may succeed.
    pub fn is_retriable(&self) -> bool {
        matches!(self, KnowledgeError::Backend { source, .. } if source.is_retriable())
    }
}

/// The seven knowledge texts for one (class, image) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeBundle {
    pub class_name: String,
    pub image_id: String,
    pub texts: BTreeMap<KnowledgeId, String>,
}

impl KnowledgeBundle {
    pub fn get(&self, id: KnowledgeId) -> Option<&str> {
        self.texts.get(&id).map(String::as_str)
    }

    /// Checks that all seven texts are present and non-empty.
    pub fn validate(&self) -> Result<(), KnowledgeError> {
        for id in KnowledgeId::ALL {
            match self.texts.get(&id) {
                Some(t) if !t.trim().is_empty() => {}
                _ => {
                    return Err(KnowledgeError::Incomplete {
                        class: self.class_name.clone(),
                        image_id: self.image_id.clone(),
                        missing: id,
                    })
                }
            }
        }
        Ok(())
    }
}

/// Retry policy applied around every backend call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3 }
    }
}

fn query_with_retry(
    backend: &dyn MllmBackend,
    query: &Query<'_>,
    retry: RetryPolicy,
) -> Result<String, KnowledgeError> {
    let attempts = retry.max_attempts.max(1);
    let mut last = None;
    for attempt in 1..=attempts {
        match backend.query(query) {
            Ok(text) if !text.trim().is_empty() => return Ok(text.trim().to_string()),
            Ok(_) => last = Some(BackendError::EmptyResponse),
            Err(e) if e.is_retriable() => {
                log::warn!("prompt {} attempt {attempt}/{attempts} failed: {e}", query.prompt_id);
                last = Some(e);
            }
            Err(e) => {
                return Err(KnowledgeError::Backend {
                    prompt: query.prompt_id,
                    attempts: attempt,
                    source: e,
                })
            }
        }
    }
    Err(KnowledgeError::Backend {
        prompt: query.prompt_id,
        attempts,
        source: last.unwrap_or(BackendError::EmptyResponse),
    })
}

/// Camouflage-target knowledge: `Ka` rendered locally, `Kb` from the text-only prompt.
pub fn generate_class_knowledge(
    class_name: &str,
    backend: &dyn MllmBackend,
    retry: RetryPolicy,
) -> Result<ClassEntry, KnowledgeError> {
    let ka = render_prompt(PromptTemplate::get(PromptId::Ka), class_name)?;
    let p1 = PromptTemplate::get(PromptId::P1);
    let text = render_prompt(p1, class_name)?;
    let kb = query_with_retry(
        backend,
        &Query {
            prompt_id: PromptId::P1,
            class_name,
            text: &text,
            image: None,
        },
        retry,
    )?;
    Ok(ClassEntry { ka, kb })
}

/// Camouflage-scene knowledge `Kc`..`Kg`, each prompt issued with the photo attached.
pub fn generate_scene_knowledge(
    class_name: &str,
    image: Option<&RgbImage>,
    backend: &dyn MllmBackend,
    retry: RetryPolicy,
) -> Result<ImageEntry, KnowledgeError> {
    let image = image.ok_or_else(|| {
        KnowledgeError::Validation(format!(
            "scene prompts for class `{class_name}` require an image"
        ))
    })?;
    let mut texts = Vec::with_capacity(5);
    for id in KnowledgeId::SCENE {
        let prompt_id = id.prompt();
        let text = render_prompt(PromptTemplate::get(prompt_id), class_name)?;
        texts.push(query_with_retry(
            backend,
            &Query {
                prompt_id,
                class_name,
                text: &text,
                image: Some(image),
            },
            retry,
        )?);
    }
    let mut it = texts.into_iter();
    let mut next = || it.next().unwrap_or_default();
    Ok(ImageEntry {
        class: class_name.to_string(),
        kc: next(),
        kd: next(),
        ke: next(),
        kf: next(),
        kg: next(),
    })
}

/// Produces the complete bundle for one photo.
pub fn generate_bundle(
    class_name: &str,
    image: Option<&RgbImage>,
    image_id: &str,
    backend: &dyn MllmBackend,
    retry: RetryPolicy,
) -> Result<KnowledgeBundle, KnowledgeError> {
    validate_class_name(class_name)?;
    if image.is_none() {
        return Err(KnowledgeError::Validation(format!(
            "scene prompts for class `{class_name}` require an image"
        )));
    }
    let class = generate_class_knowledge(class_name, backend, retry)?;
    let scene = generate_scene_knowledge(class_name, image, backend, retry)?;
    let bundle = cache::assemble(class_name, image_id, &class, &scene);
    bundle.validate()?;
    Ok(bundle)
}

pub(crate) fn validate_class_name(class_name: &str) -> Result<(), KnowledgeError> {
    if class_name.trim().is_empty() {
        return Err(KnowledgeError::Validation("class name is empty".into()));
    }
    if class_name.contains(['\n', '\r']) {
        return Err(KnowledgeError::Validation(format!(
            "class name {class_name:?} contains a newline"
        )));
    }
    Ok(())
}
