//! Clients for text-generation and embedding endpoints.
//!
//! A [`Client`] wraps one [`ModelEndpoint`]. Endpoints whose `base_url` uses
//! the `mock:<seed>` scheme are served by the deterministic offline
//! [`MockProvider`]; everything else goes through a chat-completions-style
//! HTTP [`Transport`], which is injectable so tests never touch the network.

mod http;
mod mock;

use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use http::{HttpResponse, Transport, TransportError, UreqTransport};
pub use mock::{MockMode, MockProvider, MOCK_EMBED_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Weak,
    Strong,
    Embed,
    Judge,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Weak => "weak",
            Role::Strong => "strong",
            Role::Embed => "embed",
            Role::Judge => "judge",
        })
    }
}

fn default_max_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub role: Role,
    /// HTTP base URL (e.g. `https://host/v1`) or `mock:<seed>[:echo]`.
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key; empty for none.
    #[serde(default)]
    pub api_key_env: String,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

impl ModelEndpoint {
    pub fn new(role: Role, base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            role,
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key_env: String::new(),
            max_in_flight: default_max_in_flight(),
        }
    }

    /// Shorthand for a mock endpoint named after its role and seed.
    pub fn mock(role: Role, seed: u64) -> Self {
        Self::new(role, format!("mock:{seed}"), format!("mock-{role}-{seed}"))
    }

    /// Stable identity recorded as the producer of generated text.
    pub fn id(&self) -> String {
        self.model_name.clone()
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.max_in_flight == 0 {
            return Err(ProviderError::Config("max_in_flight must be at least 1".into()));
        }
        if self.model_name.is_empty() {
            return Err(ProviderError::Config("model_name must be nonempty".into()));
        }
        if self.base_url.starts_with("mock:") {
            MockProvider::parse_url(&self.base_url)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub n_samples: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self { temperature: 0.0, max_tokens: 512, n_samples: 1, stop: None, seed: None }
    }
}

impl GenerationParams {
    pub fn greedy() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(ProviderError::Precondition(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        if self.n_samples == 0 || self.max_tokens == 0 {
            return Err(ProviderError::Precondition("n_samples and max_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Unit-norm embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// Normalizes `values` to unit L2 norm. Returns `None` for empty or zero
    /// vectors and for non-finite entries.
    pub fn from_raw(values: Vec<f64>) -> Option<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return None;
        }
        Some(Self { values: values.into_iter().map(|v| v / norm).collect() })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Cosine similarity, clamped to [-1, 1] against rounding.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        dot.clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited")]
    RateLimited,
    #[error("bad response: {0}")]
    BadResponse(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("endpoint configuration: {0}")]
    Config(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Transport(_) | ProviderError::RateLimited)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 5, base_delay: Duration::from_millis(500), factor: 2.0 }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based).
    pub fn delay(&self, retry: u32) -> Duration {
        self.base_delay.mul_f64(self.factor.powi(retry.saturating_sub(1) as i32))
    }
}

/// Counting semaphore bounding requests outstanding on one endpoint.
#[derive(Debug)]
struct InFlightGate {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct GatePermit<'a>(&'a InFlightGate);

impl InFlightGate {
    fn new(limit: usize) -> Self {
        Self { limit, active: Mutex::new(0), freed: Condvar::new() }
    }

    fn acquire(&self) -> GatePermit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        GatePermit(self)
    }
}

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

enum Backend {
    Mock(MockProvider),
    Http { transport: Arc<dyn Transport>, api_key: Option<String> },
}

/// Thread-safe client for one endpoint.
pub struct Client {
    endpoint: ModelEndpoint,
    backend: Backend,
    retry: RetryPolicy,
    gate: InFlightGate,
}

impl fmt::Debug for Client {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Client").field("endpoint", &self.endpoint).finish_non_exhaustive()
    }
}

impl Client {
    /// Builds a client, choosing the mock backend for `mock:` URLs and the
    /// default HTTP transport otherwise. The API key is read from the
    /// environment variable named by `api_key_env`.
    pub fn new(endpoint: ModelEndpoint) -> Result<Self, ProviderError> {
        if endpoint.base_url.starts_with("mock:") {
            let mock = MockProvider::from_url(&endpoint.base_url)?;
            return Self::with_mock(endpoint, mock);
        }
        Self::with_transport(endpoint, Arc::new(UreqTransport::new()))
    }

    pub fn with_mock(endpoint: ModelEndpoint, mock: MockProvider) -> Result<Self, ProviderError> {
        endpoint.validate()?;
        Ok(Self {
            gate: InFlightGate::new(endpoint.max_in_flight),
            endpoint,
            backend: Backend::Mock(mock),
            retry: RetryPolicy::default(),
        })
    }

    pub fn with_transport(endpoint: ModelEndpoint, transport: Arc<dyn Transport>) -> Result<Self, ProviderError> {
        endpoint.validate()?;
        let api_key = if endpoint.api_key_env.is_empty() {
            None
        } else {
            Some(std::env::var(&endpoint.api_key_env).map_err(|_| {
                ProviderError::Config(format!("environment variable {} is not set", endpoint.api_key_env))
            })?)
        };
        Ok(Self {
            gate: InFlightGate::new(endpoint.max_in_flight),
            endpoint,
            backend: Backend::Http { transport, api_key },
            retry: RetryPolicy::default(),
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.endpoint
    }

    /// Returns exactly `params.n_samples` completions of `prompt`.
    pub fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<Vec<String>, ProviderError> {
        if self.endpoint.role == Role::Embed {
            return Err(ProviderError::Precondition(format!(
                "endpoint {} has role embed and cannot complete",
                self.endpoint.model_name
            )));
        }
        params.validate()?;
        let out = match &self.backend {
            Backend::Mock(mock) => {
                let _permit = self.gate.acquire();
                mock.complete(prompt, params)
            }
            Backend::Http { transport, api_key } => {
                let body = chat_body(&self.endpoint.model_name, prompt, params);
                let resp = self.send(transport.as_ref(), api_key.as_deref(), "chat/completions", &body)?;
                parse_chat(&resp, params.n_samples as usize)?
            }
        };
        debug_assert_eq!(out.len(), params.n_samples as usize);
        Ok(out)
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        if self.endpoint.role != Role::Embed {
            return Err(ProviderError::Precondition(format!(
                "endpoint {} has role {} and cannot embed",
                self.endpoint.model_name, self.endpoint.role
            )));
        }
        if text.trim().is_empty() {
            return Err(ProviderError::Precondition("cannot embed empty text".into()));
        }
        match &self.backend {
            Backend::Mock(mock) => {
                let _permit = self.gate.acquire();
                Ok(mock.embed(text))
            }
            Backend::Http { transport, api_key } => {
                let body = json!({ "model": self.endpoint.model_name, "input": text });
                let resp = self.send(transport.as_ref(), api_key.as_deref(), "embeddings", &body)?;
                parse_embedding(&resp)
            }
        }
    }

    fn send(
        &self,
        transport: &dyn Transport,
        api_key: Option<&str>,
        path: &str,
        body: &Value,
    ) -> Result<Value, ProviderError> {
        let url = format!("{}/{}", self.endpoint.base_url.trim_end_matches('/'), path);
        let mut headers = vec![("Content-Type".to_string(), "application/json".to_string())];
        if let Some(key) = api_key {
            headers.push(("Authorization".to_string(), format!("Bearer {key}")));
        }
        let mut attempt = 1;
        loop {
            let result = {
                let _permit = self.gate.acquire();
                transport.post_json(&url, &headers, body)
            };
            let outcome = match result {
                Err(e) => Err(ProviderError::Transport(e.to_string())),
                Ok(resp) => classify(resp),
            };
            match outcome {
                Err(e) if e.is_retryable() && attempt < self.retry.max_attempts => {
                    let delay = self.retry.delay(attempt);
                    tracing::debug!(endpoint = %self.endpoint.model_name, attempt, ?delay, error = %e, "retrying");
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

fn classify(resp: HttpResponse) -> Result<Value, ProviderError> {
    match resp.status {
        200..=299 => {
            serde_json::from_str(&resp.body).map_err(|e| ProviderError::BadResponse(format!("invalid JSON body: {e}")))
        }
        429 => Err(ProviderError::RateLimited),
        408 | 500..=599 => Err(ProviderError::Transport(format!("HTTP {}", resp.status))),
        s => Err(ProviderError::BadResponse(format!("HTTP {s}: {}", truncate(&resp.body, 200)))),
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn chat_body(model: &str, prompt: &str, params: &GenerationParams) -> Value {
    let mut body = json!({
        "model": model,
        "messages": [{ "role": "user", "content": prompt }],
        "temperature": params.temperature,
        "max_tokens": params.max_tokens,
        "n": params.n_samples,
    });
    if let Some(stop) = &params.stop {
        body["stop"] = json!(stop);
    }
    if let Some(seed) = params.seed {
        body["seed"] = json!(seed);
    }
    body
}

fn parse_chat(resp: &Value, n: usize) -> Result<Vec<String>, ProviderError> {
    let choices = resp
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| ProviderError::BadResponse("missing `choices` array".into()))?;
    if choices.len() != n {
        return Err(ProviderError::BadResponse(format!("expected {n} choices, got {}", choices.len())));
    }
    choices
        .iter()
        .map(|c| {
            c.pointer("/message/content")
                .and_then(Value::as_str)
                .map(str::to_owned)
                .ok_or_else(|| ProviderError::BadResponse("choice without message.content".into()))
        })
        .collect()
}

fn parse_embedding(resp: &Value) -> Result<EmbeddingVector, ProviderError> {
    let raw = resp
        .pointer("/data/0/embedding")
        .and_then(Value::as_array)
        .ok_or_else(|| ProviderError::BadResponse("missing data[0].embedding".into()))?;
    let values = raw
        .iter()
        .map(|v| v.as_f64().ok_or_else(|| ProviderError::BadResponse("non-numeric embedding".into())))
        .collect::<Result<Vec<_>, _>>()?;
    EmbeddingVector::from_raw(values).ok_or_else(|| ProviderError::BadResponse("degenerate embedding".into()))
}

/// Anything that can embed text.
pub trait TextEmbedder: Sync {
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, ProviderError>;
}

impl TextEmbedder for Client {
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        self.embed(text)
    }
}
