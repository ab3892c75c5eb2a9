use std::io::Cursor;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use base64::Engine;
use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::PromptId;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend returned status {0}")]
    Status(u16),
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("backend returned an empty response")]
    EmptyResponse,
    #[error("image encoding failed: {0}")]
    Image(String),
}

impl BackendError {
    pub fn is_retriable(&self) -> bool {
        match self {
            BackendError::Transport(_) | BackendError::EmptyResponse => true,
            BackendError::Status(code) => *code == 429 || *code >= 500,
            BackendError::Malformed(_) | BackendError::Image(_) => false,
        }
    }
}

/// One prompt issued to a multimodal LLM.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub prompt_id: PromptId,
    pub class_name: &'a str,
    /// Fully rendered prompt text.
    pub text: &'a str,
    pub image: Option<&'a RgbImage>,
}

pub trait MllmBackend: Send + Sync {
    fn query(&self, query: &Query<'_>) -> Result<String, BackendError>;
}

/// Hex SHA-256 over the raster dimensions and RGB bytes.
pub fn image_digest(image: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(image.width().to_le_bytes());
    h.update(image.height().to_le_bytes());
    h.update(image.as_raw());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic canned backend: `stub(<prompt-id>,<class>,<image-hash-prefix>)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubBackend;

impl MllmBackend for StubBackend {
    fn query(&self, query: &Query<'_>) -> Result<String, BackendError> {
        let hash = match query.image {
            Some(img) => image_digest(img)[..12].to_string(),
            None => "-".to_string(),
        };
        Ok(format!("stub({},{},{})", query.prompt_id, query.class_name, hash))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpBackendConfig {
    pub endpoint: String,
    pub timeout: Duration,
    /// Minimum spacing between consecutive requests.
    pub min_interval: Duration,
}

#[derive(Serialize)]
struct HttpRequest<'a> {
    prompt: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_base64: Option<String>,
}

#[derive(Deserialize)]
struct HttpResponse {
    text: String,
}

/// Posts `{prompt, image_base64}` as JSON and expects `{text}` back.
pub struct HttpBackend {
    agent: ureq::Agent,
    config: HttpBackendConfig,
    last_request: Mutex<Option<Instant>>,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            config,
            last_request: Mutex::new(None),
        }
    }

    fn throttle(&self) {
        let mut last = self.last_request.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < self.config.min_interval {
                std::thread::sleep(self.config.min_interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }
}

fn encode_png_base64(image: &RgbImage) -> Result<String, BackendError> {
    let mut buf = Cursor::new(Vec::new());
    image
        .write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| BackendError::Image(e.to_string()))?;
    Ok(base64::engine::general_purpose::STANDARD.encode(buf.into_inner()))
}

impl MllmBackend for HttpBackend {
    fn query(&self, query: &Query<'_>) -> Result<String, BackendError> {
        let body = HttpRequest {
            prompt: query.text,
            image_base64: query.image.map(encode_png_base64).transpose()?,
        };
        self.throttle();
        let mut resp = self
            .agent
            .post(&self.config.endpoint)
            .send_json(&body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(BackendError::Status(status));
        }
        let parsed: HttpResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Malformed(e.to_string()))?;
        Ok(parsed.text)
    }
}
