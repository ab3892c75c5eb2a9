//! Frozen text embedding of knowledge texts.
//!
//! Backends map a text to a fixed-width real vector. Nothing here is ever
//! updated by training.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::knowledge::{KnowledgeBundle, KnowledgeId};

pub const DEFAULT_DIM: usize = 512;
/// Context length of the contrastive text towers this stands in for.
pub const DEFAULT_TOKEN_LIMIT: usize = 77;

#[derive(Debug, Error)]
pub enum TextEncoderError {
    #[error("cannot encode empty text")]
    EmptyText,
    #[error("backend produced width {found}, expected {expected}")]
    Width { found: usize, expected: usize },
    #[error("backend produced a non-finite embedding")]
    NonFinite,
    #[error("no precomputed embedding for text {0:?}")]
    Unknown(String),
    #[error("bundle for ({class}, {image_id}) is missing {missing}")]
    MissingKnowledge {
        class: String,
        image_id: String,
        missing: KnowledgeId,
    },
    #[error("failed to load embedding table {path}: {reason}")]
    Table { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    /// Set when the text exceeded the backend's token limit and was cut.
    pub truncated: bool,
}

pub trait TextEmbeddingBackend: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<TextEmbedding, TextEncoderError>;
}

/// Seeded pseudo-random unit vectors keyed by the (truncated) token sequence.
#[derive(Debug, Clone)]
pub struct HashStubBackend {
    dim: usize,
    token_limit: usize,
}

impl HashStubBackend {
    pub fn new(dim: usize, token_limit: usize) -> Self {
        Self {
            dim,
            token_limit: token_limit.max(1),
        }
    }
}

impl Default for HashStubBackend {
    fn default() -> Self {
        Self::new(DEFAULT_DIM, DEFAULT_TOKEN_LIMIT)
    }
}

impl TextEmbeddingBackend for HashStubBackend {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<TextEmbedding, TextEncoderError> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        // Leading tokens are kept.
        let truncated = tokens.len() > self.token_limit;
        let kept = tokens[..tokens.len().min(self.token_limit)].join(" ");
        let digest = Sha256::digest(kept.as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let mut v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(TextEmbedding {
            vector: v,
            truncated,
        })
    }
}

/// Embeddings computed offline by a pretrained text tower, looked up by exact text.
///
/// File format: `{"dim": 512, "embeddings": {"<text>": [f64, ...]}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrecomputedBackend {
    dim: usize,
    embeddings: HashMap<String, Vec<f64>>,
}

impl PrecomputedBackend {
    pub fn new(dim: usize, embeddings: HashMap<String, Vec<f64>>) -> Self {
        Self { dim, embeddings }
    }

    pub fn load(path: &Path) -> Result<Self, TextEncoderError> {
        let table_err = |reason: String| TextEncoderError::Table {
            path: path.display().to_string(),
            reason,
        };
        let bytes = std::fs::read(path).map_err(|e| table_err(e.to_string()))?;
        let table: PrecomputedBackend =
            serde_json::from_slice(&bytes).map_err(|e| table_err(e.to_string()))?;
        if let Some((text, v)) = table.embeddings.iter().find(|(_, v)| v.len() != table.dim) {
            return Err(table_err(format!(
                "entry {text:?} has width {}, table declares {}",
                v.len(),
                table.dim
            )));
        }
        Ok(table)
    }
}

impl TextEmbeddingBackend for PrecomputedBackend {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<TextEmbedding, TextEncoderError> {
        self.embeddings
            .get(text)
            .map(|v| TextEmbedding {
                vector: v.clone(),
                truncated: false,
            })
            .ok_or_else(|| TextEncoderError::Unknown(text.to_string()))
    }
}

/// Encodes one text, validating width and finiteness.
pub fn encode_text(
    text: &str,
    backend: &dyn TextEmbeddingBackend,
) -> Result<TextEmbedding, TextEncoderError> {
    if text.trim().is_empty() {
        return Err(TextEncoderError::EmptyText);
    }
    let emb = backend.embed(text)?;
    if emb.vector.len() != backend.dim() {
        return Err(TextEncoderError::Width {
            found: emb.vector.len(),
            expected: backend.dim(),
        });
    }
    if !emb.vector.iter().all(|x| x.is_finite()) {
        return Err(TextEncoderError::NonFinite);
    }
    Ok(emb)
}

/// The seven knowledge embeddings of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedKnowledge {
    pub class_name: String,
    pub image_id: String,
    pub vectors: BTreeMap<KnowledgeId, Vec<f64>>,
    /// Knowledge ids whose text was truncated before encoding.
    pub truncated: Vec<KnowledgeId>,
}

impl EncodedKnowledge {
    pub fn dim(&self) -> usize {
        self.vectors.values().next().map_or(0, Vec::len)
    }

    /// # Panics
    /// If `id` is absent, which `encode_bundle` never produces.
    pub fn get(&self, id: KnowledgeId) -> &[f64] {
        &self.vectors[&id]
    }
}

/// Frozen text encoder with the optional post-hoc L2 normalization.
pub struct TextEncoder {
    backend: Box<dyn TextEmbeddingBackend>,
    normalize: bool,
}

impl TextEncoder {
    pub fn new(backend: Box<dyn TextEmbeddingBackend>, normalize: bool) -> Self {
        Self { backend, normalize }
    }

    pub fn hash_stub(dim: usize) -> Self {
        Self::new(Box::new(HashStubBackend::new(dim, DEFAULT_TOKEN_LIMIT)), false)
    }

    pub fn dim(&self) -> usize {
        self.backend.dim()
    }

    pub fn encode(&self, text: &str) -> Result<TextEmbedding, TextEncoderError> {
        let mut emb = encode_text(text, self.backend.as_ref())?;
        if self.normalize {
            let norm = emb.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                emb.vector.iter_mut().for_each(|x| *x /= norm);
            }
        }
        Ok(emb)
    }

    pub fn encode_bundle(
        &self,
        bundle: &KnowledgeBundle,
    ) -> Result<EncodedKnowledge, TextEncoderError> {
        let mut vectors = BTreeMap::new();
        let mut truncated = Vec::new();
        for id in KnowledgeId::ALL {
            let text = bundle
                .get(id)
                .filter(|t| !t.trim().is_empty())
                .ok_or_else(|| TextEncoderError::MissingKnowledge {
                    class: bundle.class_name.clone(),
                    image_id: bundle.image_id.clone(),
                    missing: id,
                })?;
            let emb = self.encode(text)?;
            if emb.truncated {
                log::warn!(
                    "{id} for ({}, {}) truncated to the encoder's token limit",
                    bundle.class_name,
                    bundle.image_id
                );
                truncated.push(id);
            }
            vectors.insert(id, emb.vector);
        }
        Ok(EncodedKnowledge {
            class_name: bundle.class_name.clone(),
            image_id: bundle.image_id.clone(),
            vectors,
            truncated,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::{generate_bundle, RetryPolicy, StubBackend};
    use image::RgbImage;

    fn bundle() -> KnowledgeBundle {
        let img = RgbImage::from_pixel(8, 8, image::Rgb([9, 9, 9]));
        generate_bundle("Mockingbird", Some(&img), "img-001", &StubBackend, RetryPolicy::default())
            .unwrap()
    }

    #[test]
    fn stub_is_deterministic_unit_vector() {
        let b = HashStubBackend::default();
        let a = encode_text("A photo of a Mockingbird.", &b).unwrap();
        let again = encode_text("A photo of a Mockingbird.", &b).unwrap();
        assert_eq!(a, again);
        assert_eq!(a.vector.len(), 512);
        let norm: f64 = a.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(!a.truncated);
    }

    #[test]
    fn empty_text_is_rejected() {
        assert!(matches!(
            encode_text("", &HashStubBackend::default()),
            Err(TextEncoderError::EmptyText)
        ));
    }

    #[test]
    fn long_text_is_truncated_not_rejected() {
        let b = HashStubBackend::default();
        let words: Vec<String> = (0..500).map(|i| format!("w{i}")).collect();
        let long = words.join(" ");
        let emb = encode_text(&long, &b).unwrap();
        assert!(emb.truncated);
        assert_eq!(emb.vector.len(), 512);
        // Only the leading 77 tokens matter.
        let head = words[..77].join(" ");
        assert_eq!(encode_text(&head, &b).unwrap().vector, emb.vector);
    }

    #[test]
    fn bundle_encodes_to_seven_vectors() {
        let enc = TextEncoder::hash_stub(512);
        let e1 = enc.encode_bundle(&bundle()).unwrap();
        assert_eq!(e1.vectors.len(), 7);
        assert!(e1.vectors.values().all(|v| v.len() == 512));
        assert_eq!(e1, enc.encode_bundle(&bundle()).unwrap());
    }

    #[test]
    fn bundle_missing_knowledge_fails() {
        let mut b = bundle();
        b.texts.remove(&KnowledgeId::Kd);
        let err = TextEncoder::hash_stub(512).encode_bundle(&b).unwrap_err();
        assert!(matches!(
            err,
            TextEncoderError::MissingKnowledge {
                missing: KnowledgeId::Kd,
                ..
            }
        ));
    }

    #[test]
    fn normalization_flag_rescales() {
        let mut table = HashMap::new();
        table.insert("a".to_string(), vec![3.0, 4.0]);
        let raw = TextEncoder::new(Box::new(PrecomputedBackend::new(2, table.clone())), false);
        let unit = TextEncoder::new(Box::new(PrecomputedBackend::new(2, table)), true);
        assert_eq!(raw.encode("a").unwrap().vector, vec![3.0, 4.0]);
        assert_eq!(unit.encode("a").unwrap().vector, vec![0.6, 0.8]);
        assert!(matches!(raw.encode("b"), Err(TextEncoderError::Unknown(_))));
    }

    #[test]
    fn precomputed_table_loads_and_checks_width() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.json");
        std::fs::write(&good, r#"{"dim": 2, "embeddings": {"x": [1.0, 2.0]}}"#).unwrap();
        let b = PrecomputedBackend::load(&good).unwrap();
        assert_eq!(encode_text("x", &b).unwrap().vector, vec![1.0, 2.0]);
        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, r#"{"dim": 3, "embeddings": {"x": [1.0, 2.0]}}"#).unwrap();
        assert!(PrecomputedBackend::load(&bad).is_err());
    }
}
