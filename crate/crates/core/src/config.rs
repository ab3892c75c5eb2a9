//! Run configuration: one TOML document with a section per module, plus
//! `key=value` overrides from the command line.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::injector::InjectorConfig;
use crate::knowledge::{HttpBackendConfig, RetryPolicy};
use crate::model::ModelConfig;
use crate::pipeline::PipelineConfig;
use crate::text_encoder::{HashStubBackend, PrecomputedBackend, TextEncoder, TextEncoderError, DEFAULT_DIM, DEFAULT_TOKEN_LIMIT};
use crate::train::TrainConfig;

pub const CACHE_ENV: &str = "MLKG_CACHE";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid override `{0}` (expected key=value)")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MllmBackendKind {
    #[default]
    Stub,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MllmConfig {
    pub backend: MllmBackendKind,
    pub endpoint: String,
    pub timeout_secs: f64,
    pub min_interval_ms: u64,
    pub max_attempts: u32,
    /// Knowledge cache file.
    pub cache: PathBuf,
}

impl Default for MllmConfig {
    fn default() -> Self {
        Self {
            backend: MllmBackendKind::Stub,
            endpoint: "http://127.0.0.1:8080/generate".into(),
            timeout_secs: 60.0,
            min_interval_ms: 0,
            max_attempts: RetryPolicy::default().max_attempts,
            cache: PathBuf::from("knowledge_cache.json"),
        }
    }
}

impl MllmConfig {
    pub fn http(&self) -> HttpBackendConfig {
        HttpBackendConfig {
            endpoint: self.endpoint.clone(),
            timeout: Duration::from_secs_f64(self.timeout_secs),
            min_interval: Duration::from_millis(self.min_interval_ms),
        }
    }

    pub fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.max_attempts,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextBackendKind {
    /// Deterministic hashed embeddings; no model weights needed.
    #[default]
    Hash,
    /// Embeddings looked up in a JSON table produced offline.
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub backend: TextBackendKind,
    pub dim: usize,
    pub token_limit: usize,
    pub normalize: bool,
    pub table: Option<PathBuf>,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            backend: TextBackendKind::Hash,
            dim: DEFAULT_DIM,
            token_limit: DEFAULT_TOKEN_LIMIT,
            normalize: false,
            table: None,
        }
    }
}

impl TextEncoderConfig {
    pub fn build(&self) -> Result<TextEncoder, TextEncoderError> {
        let backend: Box<dyn crate::text_encoder::TextEmbeddingBackend> = match self.backend {
            TextBackendKind::Hash => Box::new(HashStubBackend::new(self.dim, self.token_limit)),
            TextBackendKind::Precomputed => {
                let path = self.table.as_deref().ok_or_else(|| TextEncoderError::Table {
                    path: String::new(),
                    reason: "text_encoder.table is required for the precomputed backend".into(),
                })?;
                Box::new(PrecomputedBackend::load(path)?)
            }
        };
        Ok(TextEncoder::new(backend, self.normalize))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Also list every sample's scores in the report.
    pub per_sample: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mllm: MllmConfig,
    pub text_encoder: TextEncoderConfig,
    pub injector: InjectorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn parse_value(raw: &str) -> toml::Value {
    // Bare words fall back to strings so `--set train.selection=scene` works.
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(assignment.to_string()))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(assignment.to_string()));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Override(assignment.to_string()))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses an optional file, applies overrides, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                toml::from_str::<toml::Table>(&text).map_err(|e| ConfigError::Parse(e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.pipeline()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.text_encoder.dim != self.injector.d_text {
            return Err(ConfigError::Invalid(format!(
                "text_encoder.dim ({}) must equal injector.d_text ({})",
                self.text_encoder.dim, self.injector.d_text
            )));
        }
        if self.text_encoder.dim == 0 || self.text_encoder.token_limit == 0 {
            return Err(ConfigError::Invalid("text_encoder.dim and token_limit must be positive".into()));
        }
        if self.mllm.max_attempts == 0 {
            return Err(ConfigError::Invalid("mllm.max_attempts must be at least 1".into()));
        }
        if !(self.mllm.timeout_secs > 0.0 && self.mllm.timeout_secs.is_finite()) {
            return Err(ConfigError::Invalid("mllm.timeout_secs must be positive".into()));
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            model: self.model.clone(),
            injector: self.injector,
        }
    }

    /// Cache path: explicit flag, then `MLKG_CACHE`, then `mllm.cache`.
    pub fn cache_path(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        match std::env::var_os(CACHE_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.mllm.cache.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the effective configuration into `dir` as `config.toml`.
    pub fn echo_into(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), self.to_toml())
    }
}
