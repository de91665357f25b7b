//! Model access: text chat, multimodal chat and text embedding behind one
//! trait, with an OpenAI-compatible HTTP backend and a deterministic mock.

mod http;
mod mock;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpGateway;
pub use mock::{MockGateway, MockSelection};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP status {code}: {body}")]
    HttpStatus { code: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("giving up after {attempts} attempts: {last}")]
    RetriesExhausted {
        attempts: u32,
        last: Box<GatewayError>,
    },
    #[error("unsupported image media type {0:?} (expected png or jpeg)")]
    UnsupportedMediaType(String),
    #[error("image is empty")]
    EmptyImage,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("embedding dimension mismatch: expected {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
}

impl GatewayError {
    /// Timeouts, transport failures and HTTP 408/429/5xx are retried;
    /// everything else fails immediately.
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Timeout | GatewayError::Transport(_) => true,
            GatewayError::HttpStatus { code, .. } => {
                *code == 408 || *code == 429 || (500..600).contains(code)
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MediaType {
    Png,
    Jpeg,
}

impl MediaType {
    pub fn mime(self) -> &'static str {
        match self {
            MediaType::Png => "image/png",
            MediaType::Jpeg => "image/jpeg",
        }
    }

    pub fn parse(s: &str) -> Result<Self, GatewayError> {
        match s.to_ascii_lowercase().as_str() {
            "png" | "image/png" => Ok(MediaType::Png),
            "jpg" | "jpeg" | "image/jpeg" | "image/jpg" => Ok(MediaType::Jpeg),
            _ => Err(GatewayError::UnsupportedMediaType(s.to_string())),
        }
    }

    /// Detects the type from the file signature.
    pub fn sniff(bytes: &[u8]) -> Option<Self> {
        if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
            Some(MediaType::Png)
        } else if bytes.starts_with(&[0xFF, 0xD8, 0xFF]) {
            Some(MediaType::Jpeg)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageInput {
    pub bytes: Vec<u8>,
    pub media_type: MediaType,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub system: Option<String>,
    pub user: String,
    pub image: Option<ImageInput>,
    pub temperature: f32,
    pub max_tokens: u32,
}

pub const DEFAULT_MAX_TOKENS: u32 = 512;

impl ChatRequest {
    pub fn new(user: impl Into<String>) -> Self {
        ChatRequest {
            system: None,
            user: user.into(),
            image: None,
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn with_image(mut self, bytes: Vec<u8>, media_type: MediaType) -> Self {
        self.image = Some(ImageInput { bytes, media_type });
        self
    }

    pub fn with_temperature(mut self, temperature: f32) -> Self {
        if temperature != 0.0 {
            log::warn!("chat temperature overridden to {temperature}; pipeline default is 0");
        }
        self.temperature = temperature;
        self
    }

    fn validate(&self, wants_image: bool) -> Result<(), GatewayError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        match (&self.image, wants_image) {
            (Some(_), false) => Err(GatewayError::InvalidRequest(
                "text chat request carries an image; use chat_multimodal".into(),
            )),
            (None, true) => Err(GatewayError::InvalidRequest(
                "multimodal chat request has no image".into(),
            )),
            (Some(img), true) if img.bytes.is_empty() => Err(GatewayError::EmptyImage),
            _ => Ok(()),
        }
    }
}

/// A dense embedding. Values are finite; length is the dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f32>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }
}

pub(crate) fn validate_texts(texts: &[String]) -> Result<(), GatewayError> {
    if texts.is_empty() {
        return Err(GatewayError::InvalidRequest("no texts to embed".into()));
    }
    if let Some(i) = texts.iter().position(|t| t.is_empty()) {
        return Err(GatewayError::InvalidRequest(format!("text {i} is empty")));
    }
    Ok(())
}

pub(crate) fn check_dims(vectors: &[Embedding]) -> Result<(), GatewayError> {
    let Some(first) = vectors.first() else {
        return Ok(());
    };
    let expected = first.dim();
    if expected == 0 {
        return Err(GatewayError::MalformedResponse("zero-length embedding".into()));
    }
    for v in vectors {
        if v.dim() != expected {
            return Err(GatewayError::DimMismatch {
                expected,
                found: v.dim(),
            });
        }
        if v.0.iter().any(|x| !x.is_finite()) {
            return Err(GatewayError::MalformedResponse("non-finite embedding value".into()));
        }
    }
    Ok(())
}

/// Uniform model access. Implementations are shared across worker threads.
pub trait ModelGateway: Send + Sync {
    /// Text-only chat. Returns the first choice's message text verbatim.
    fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError>;

    /// Chat with one image attached to the user message.
    fn chat_multimodal(&self, request: &ChatRequest) -> Result<String, GatewayError>;

    /// Embeds `texts`; output `i` corresponds to input `i`.
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, GatewayError>;

    /// Identifies the backend and model, used in cache keys and index files.
    fn model_tag(&self) -> String;

    fn telemetry(&self) -> TelemetrySnapshot;

    /// Upper bound on useful caller-side parallelism.
    fn max_inflight(&self) -> usize;
}

pub type SharedGateway = Arc<dyn ModelGateway>;

#[derive(Debug, Default)]
pub struct Telemetry {
    requests: AtomicU64,
    retries: AtomicU64,
    failures: AtomicU64,
    tokens: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TelemetrySnapshot {
    pub requests: u64,
    pub retries: u64,
    pub failures: u64,
    pub tokens: u64,
}

impl Telemetry {
    pub fn request(&self) {
        self.requests.fetch_add(1, Ordering::Relaxed);
    }
    pub fn retry(&self) {
        self.retries.fetch_add(1, Ordering::Relaxed);
    }
    pub fn failure(&self) {
        self.failures.fetch_add(1, Ordering::Relaxed);
    }
    pub fn tokens(&self, n: u64) {
        self.tokens.fetch_add(n, Ordering::Relaxed);
    }
    pub fn snapshot(&self) -> TelemetrySnapshot {
        TelemetrySnapshot {
            requests: self.requests.load(Ordering::Relaxed),
            retries: self.retries.load(Ordering::Relaxed),
            failures: self.failures.load(Ordering::Relaxed),
            tokens: self.tokens.load(Ordering::Relaxed),
        }
    }
}

/// Counting semaphore bounding outstanding requests.
#[derive(Debug)]
pub struct InflightLimiter {
    max: usize,
    current: Mutex<usize>,
    freed: Condvar,
}

pub struct InflightPermit<'a> {
    limiter: &'a InflightLimiter,
}

impl InflightLimiter {
    pub fn new(max: usize) -> Self {
        InflightLimiter {
            max: max.max(1),
            current: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InflightPermit<'_> {
        let mut cur = self.current.lock().unwrap();
        while *cur >= self.max {
            cur = self.freed.wait(cur).unwrap();
        }
        *cur += 1;
        InflightPermit { limiter: self }
    }

    pub fn max(&self) -> usize {
        self.max
    }
}

impl Drop for InflightPermit<'_> {
    fn drop(&mut self) {
        let mut cur = self.limiter.current.lock().unwrap();
        *cur -= 1;
        self.limiter.freed.notify_one();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Http,
    Mock,
}

impl std::str::FromStr for Backend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "http" => Ok(Backend::Http),
            "mock" => Ok(Backend::Mock),
            other => Err(format!("unknown backend {other:?} (expected http or mock)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub backend: Backend,
    /// Base URL; `/chat/completions` and `/embeddings` are appended.
    pub endpoint_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_inflight: usize,
    pub max_retries: u32,
    pub retry_base_delay_ms: u64,
    pub embed_batch_size: usize,
    pub max_tokens: u32,
    pub temperature: f32,
    pub mock_seed: u64,
    pub mock_dim: usize,
    pub mock_selection: MockSelection,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            backend: Backend::Http,
            endpoint_url: "http://127.0.0.1:8000/v1".into(),
            model_name: String::new(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 120.0,
            max_inflight: 4,
            max_retries: 3,
            retry_base_delay_ms: 500,
            embed_batch_size: 32,
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: 0.0,
            mock_seed: 0,
            mock_dim: mock::DEFAULT_DIM,
            mock_selection: MockSelection::HashChoice,
        }
    }
}

impl GatewayConfig {
    pub fn mock() -> Self {
        GatewayConfig {
            backend: Backend::Mock,
            ..Default::default()
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs.max(0.001))
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_inflight == 0 {
            return Err(GatewayError::InvalidRequest("max_inflight must be >= 1".into()));
        }
        if self.embed_batch_size == 0 {
            return Err(GatewayError::InvalidRequest("embed_batch_size must be >= 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.backend == Backend::Mock && self.mock_dim == 0 {
            return Err(GatewayError::InvalidRequest("mock_dim must be >= 1".into()));
        }
        Ok(())
    }

    /// Builds the configured backend.
    pub fn connect(&self) -> Result<SharedGateway, GatewayError> {
        self.validate()?;
        if self.temperature != 0.0 {
            log::warn!(
                "gateway {:?} configured with temperature {}; pipeline default is 0",
                self.model_name,
                self.temperature
            );
        }
        Ok(match self.backend {
            Backend::Http => Arc::new(HttpGateway::new(self.clone())),
            Backend::Mock => Arc::new(MockGateway::from_config(self)),
        })
    }
}
