//! OpenAI-compatible `/chat/completions` and `/embeddings` client.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde_json::{json, Value};

use super::{
    check_dims, validate_texts, ChatRequest, Embedding, GatewayConfig, GatewayError, InflightLimiter,
    ModelGateway, Telemetry, TelemetrySnapshot,
};
use crate::pool::parallel_map;

const BODY_EXCERPT: usize = 512;
const MAX_BACKOFF: Duration = Duration::from_secs(30);
const MAX_RESPONSE_BYTES: u64 = 256 * 1024 * 1024;

pub struct HttpGateway {
    config: GatewayConfig,
    agent: ureq::Agent,
    limiter: InflightLimiter,
    telemetry: Telemetry,
}

impl HttpGateway {
    pub fn new(config: GatewayConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout()))
            .http_status_as_error(false)
            .max_idle_connections_per_host(config.max_inflight)
            .build()
            .into();
        HttpGateway {
            limiter: InflightLimiter::new(config.max_inflight),
            config,
            agent,
            telemetry: Telemetry::default(),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.endpoint_url.trim_end_matches('/'), path)
    }

    fn api_key(&self) -> Option<String> {
        if self.config.api_key_env.is_empty() {
            return None;
        }
        std::env::var(&self.config.api_key_env).ok().filter(|k| !k.is_empty())
    }

    fn send_once(&self, url: &str, body: &str) -> Result<Value, GatewayError> {
        let _permit = self.limiter.acquire();
        self.telemetry.request();
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = self.api_key() {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(map_transport)?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .with_config()
            .limit(MAX_RESPONSE_BYTES)
            .read_to_string()
            .map_err(map_transport)?;
        if !(200..300).contains(&status) {
            let body: String = text.chars().take(BODY_EXCERPT).collect();
            return Err(GatewayError::HttpStatus { code: status, body });
        }
        serde_json::from_str(&text).map_err(|e| GatewayError::MalformedResponse(e.to_string()))
    }

    fn backoff(&self, retry: u32) -> Duration {
        let base = Duration::from_millis(self.config.retry_base_delay_ms);
        base.saturating_mul(1u32 << retry.min(16)).min(MAX_BACKOFF)
    }

    /// POSTs `body` to `path`, retrying transient failures with exponential
    /// backoff.
    fn post(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let url = self.url(path);
        let body = body.to_string();
        let mut attempt = 0u32;
        loop {
            match self.send_once(&url, &body) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.config.max_retries => {
                    log::debug!("{path}: attempt {} failed ({e}), retrying", attempt + 1);
                    self.telemetry.retry();
                    std::thread::sleep(self.backoff(attempt));
                    attempt += 1;
                }
                Err(e) => {
                    self.telemetry.failure();
                    if e.is_retryable() {
                        return Err(GatewayError::RetriesExhausted {
                            attempts: attempt + 1,
                            last: Box::new(e),
                        });
                    }
                    return Err(e);
                }
            }
        }
    }

    fn chat_body(&self, request: &ChatRequest) -> Value {
        let mut messages = Vec::new();
        if let Some(system) = &request.system {
            messages.push(json!({"role": "system", "content": system}));
        }
        let content = match &request.image {
            None => Value::String(request.user.clone()),
            Some(img) => {
                let url = format!("data:{};base64,{}", img.media_type.mime(), BASE64.encode(&img.bytes));
                json!([
                    {"type": "text", "text": request.user},
                    {"type": "image_url", "image_url": {"url": url}}
                ])
            }
        };
        messages.push(json!({"role": "user", "content": content}));
        json!({
            "model": self.config.model_name,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        })
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let resp = self.post("chat/completions", &self.chat_body(request))?;
        if let Some(n) = resp.pointer("/usage/total_tokens").and_then(Value::as_u64) {
            self.telemetry.tokens(n);
        }
        let content = resp
            .pointer("/choices/0/message/content")
            .ok_or_else(|| GatewayError::MalformedResponse("missing choices[0].message.content".into()))?;
        match content {
            Value::String(s) => Ok(s.clone()),
            // Some servers return content parts even for text replies.
            Value::Array(parts) => Ok(parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect()),
            other => Err(GatewayError::MalformedResponse(format!(
                "unexpected message content {other}"
            ))),
        }
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>, GatewayError> {
        let resp = self.post(
            "embeddings",
            &json!({"model": self.config.model_name, "input": texts}),
        )?;
        if let Some(n) = resp.pointer("/usage/total_tokens").and_then(Value::as_u64) {
            self.telemetry.tokens(n);
        }
        let data = resp
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| GatewayError::MalformedResponse("missing data array".into()))?;
        if data.len() != texts.len() {
            return Err(GatewayError::MalformedResponse(format!(
                "{} embeddings for {} inputs",
                data.len(),
                texts.len()
            )));
        }
        let mut slots: Vec<Option<Embedding>> = vec![None; texts.len()];
        for (pos, item) in data.iter().enumerate() {
            let idx = item
                .get("index")
                .and_then(Value::as_u64)
                .map(|i| i as usize)
                .unwrap_or(pos);
            let values = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| GatewayError::MalformedResponse("missing embedding".into()))?
                .iter()
                .map(|x| x.as_f64().map(|f| f as f32))
                .collect::<Option<Vec<f32>>>()
                .ok_or_else(|| GatewayError::MalformedResponse("non-numeric embedding".into()))?;
            match slots.get_mut(idx) {
                Some(slot @ None) => *slot = Some(Embedding(values)),
                _ => {
                    return Err(GatewayError::MalformedResponse(format!(
                        "embedding index {idx} out of range or repeated"
                    )))
                }
            }
        }
        Ok(slots.into_iter().map(|s| s.expect("every slot filled")).collect())
    }
}

fn map_transport(e: ureq::Error) -> GatewayError {
    match e {
        ureq::Error::Timeout(_) => GatewayError::Timeout,
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => GatewayError::Timeout,
        ureq::Error::StatusCode(code) => GatewayError::HttpStatus {
            code,
            body: String::new(),
        },
        other => GatewayError::Transport(other.to_string()),
    }
}

impl ModelGateway for HttpGateway {
    fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        request.validate(false)?;
        self.complete(request)
    }

    fn chat_multimodal(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        request.validate(true)?;
        self.complete(request)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, GatewayError> {
        validate_texts(texts)?;
        let chunks: Vec<&[String]> = texts.chunks(self.config.embed_batch_size).collect();
        let mut out = Vec::with_capacity(texts.len());
        for batch in parallel_map(&chunks, self.config.max_inflight, |_, chunk| self.embed_batch(chunk)) {
            out.extend(batch?);
        }
        check_dims(&out)?;
        Ok(out)
    }

    fn model_tag(&self) -> String {
        format!("http:{}@{}", self.config.model_name, self.config.endpoint_url)
    }

    fn telemetry(&self) -> TelemetrySnapshot {
        self.telemetry.snapshot()
    }

    fn max_inflight(&self) -> usize {
        self.limiter.max()
    }
}
