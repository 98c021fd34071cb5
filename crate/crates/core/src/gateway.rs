//! Provider-agnostic chat-completion gateway.
//!
//! Every model call in the toolkit goes through [`Gateway`]. In replay
//! mode responses come from a fixture directory keyed by
//! `(request_tag, sha256(messages))`; a missing fixture is an error and
//! never falls through to a live call. Record mode performs the live call
//! and writes the fixture atomically so an immediate replay reproduces it.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub temperature: f64,
    pub messages: Vec<Message>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_output_chars: Option<usize>,
    pub request_tag: String,
}

impl ChatRequest {
    pub fn new(
        model: impl Into<String>,
        temperature: f64,
        messages: Vec<Message>,
        request_tag: impl Into<String>,
    ) -> Result<Self, GatewayError> {
        let req = Self {
            model: model.into(),
            temperature,
            messages,
            max_output_chars: None,
            request_tag: request_tag.into(),
        };
        req.validate()?;
        Ok(req)
    }

    pub fn with_max_output_chars(mut self, cap: usize) -> Self {
        self.max_output_chars = Some(cap);
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("request has no messages".into()));
        }
        Ok(())
    }

    /// Hex sha256 of the serialized message list.
    pub fn messages_hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.messages).expect("messages serialize");
        hex::encode(Sha256::digest(bytes))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Complete,
    Truncated,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish_reason: FinishReason,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("transient: {0}")]
    Transient(String),
    #[error("fatal: {0}")]
    Fatal(String),
}

/// A provider backend. Implementations must be safe to share across the
/// threads of [`Gateway::complete_batch`].
pub trait Transport: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError>;
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no replay fixture for tag `{tag}` (messages {hash})")]
    FixtureMiss { tag: String, hash: String },
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("live call budget of {limit} exhausted")]
    CostGuard { limit: usize },
    #[error("gateway has no live transport configured")]
    NoTransport,
    #[error("fixture store error on {path}: {reason}")]
    Fixture { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GatewayMode {
    /// Fixtures only.
    Replay,
    /// Live calls, every response written to the fixture store.
    Record,
    /// Fixture if present, otherwise a recorded live call.
    ReplayOrRecord,
    /// Live calls, nothing stored.
    Live,
}

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn delay_before(&self, attempt: u32) -> Duration {
        // attempt is 1-based; no wait before the first.
        if attempt <= 1 {
            return Duration::ZERO;
        }
        self.base_delay.mul_f64(self.factor.powi(attempt as i32 - 2))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FixtureFile {
    request_tag: String,
    messages_hash: String,
    request: ChatRequest,
    response: ChatResponse,
}

/// One JSON file per fixture key.
#[derive(Debug, Clone)]
pub struct FixtureStore {
    dir: PathBuf,
}

impl FixtureStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, request: &ChatRequest) -> PathBuf {
        let tag: String = request
            .request_tag
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        let hash = request.messages_hash();
        self.dir.join(format!("{tag}--{}.json", &hash[..16]))
    }

    pub fn load(&self, request: &ChatRequest) -> Result<Option<ChatResponse>, GatewayError> {
        let path = self.path_for(request);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => {
                return Err(GatewayError::Fixture {
                    path: path.display().to_string(),
                    reason: e.to_string(),
                })
            }
        };
        let file: FixtureFile = serde_json::from_str(&text).map_err(|e| GatewayError::Fixture {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        if file.request_tag != request.request_tag || file.messages_hash != request.messages_hash() {
            // Prefix collision on the truncated hash.
            return Ok(None);
        }
        Ok(Some(file.response))
    }

    pub fn store(&self, request: &ChatRequest, response: &ChatResponse) -> Result<(), GatewayError> {
        let path = self.path_for(request);
        let fail = |reason: String| GatewayError::Fixture {
            path: path.display().to_string(),
            reason,
        };
        std::fs::create_dir_all(&self.dir).map_err(|e| fail(e.to_string()))?;
        let file = FixtureFile {
            request_tag: request.request_tag.clone(),
            messages_hash: request.messages_hash(),
            request: request.clone(),
            response: response.clone(),
        };
        let mut body = serde_json::to_string_pretty(&file).map_err(|e| fail(e.to_string()))?;
        body.push('\n');
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| fail(e.to_string()))?;
        std::io::Write::write_all(&mut tmp, body.as_bytes()).map_err(|e| fail(e.to_string()))?;
        tmp.persist(&path).map_err(|e| fail(e.to_string()))?;
        Ok(())
    }
}

pub struct Gateway {
    mode: GatewayMode,
    fixtures: Option<FixtureStore>,
    transport: Option<Arc<dyn Transport>>,
    retry: RetryPolicy,
    max_live_calls: Option<usize>,
    live_calls: AtomicUsize,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("mode", &self.mode)
            .field("fixtures", &self.fixtures)
            .field("live_calls", &self.live_calls.load(Ordering::Relaxed))
            .finish()
    }
}

impl Gateway {
    pub fn replay(dir: impl Into<PathBuf>) -> Self {
        Self {
            mode: GatewayMode::Replay,
            fixtures: Some(FixtureStore::new(dir)),
            transport: None,
            retry: RetryPolicy::default(),
            max_live_calls: None,
            live_calls: AtomicUsize::new(0),
        }
    }

    pub fn live(transport: Arc<dyn Transport>) -> Self {
        Self {
            mode: GatewayMode::Live,
            fixtures: None,
            transport: Some(transport),
            retry: RetryPolicy::default(),
            max_live_calls: None,
            live_calls: AtomicUsize::new(0),
        }
    }

    pub fn record(dir: impl Into<PathBuf>, transport: Arc<dyn Transport>) -> Self {
        Self {
            mode: GatewayMode::Record,
            fixtures: Some(FixtureStore::new(dir)),
            transport: Some(transport),
            retry: RetryPolicy::default(),
            max_live_calls: None,
            live_calls: AtomicUsize::new(0),
        }
    }

    pub fn with_mode(mut self, mode: GatewayMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_live_calls(mut self, limit: usize) -> Self {
        self.max_live_calls = Some(limit);
        self
    }

    pub fn mode(&self) -> GatewayMode {
        self.mode
    }

    pub fn live_calls(&self) -> usize {
        self.live_calls.load(Ordering::SeqCst)
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        match self.mode {
            GatewayMode::Replay => {
                let store = self.fixtures.as_ref().expect("replay gateway has a fixture store");
                store.load(request)?.ok_or_else(|| GatewayError::FixtureMiss {
                    tag: request.request_tag.clone(),
                    hash: request.messages_hash(),
                })
            }
            GatewayMode::ReplayOrRecord => {
                let store = self.fixtures.as_ref().expect("gateway has a fixture store");
                if let Some(hit) = store.load(request)? {
                    return Ok(hit);
                }
                let response = self.call_live(request)?;
                store.store(request, &response)?;
                Ok(response)
            }
            GatewayMode::Record => {
                let response = self.call_live(request)?;
                if let Some(store) = &self.fixtures {
                    store.store(request, &response)?;
                }
                Ok(response)
            }
            GatewayMode::Live => self.call_live(request),
        }
    }

    /// Runs `requests` in waves of at most `batch_size` concurrent calls.
    /// Results are positionally aligned; a failure only affects its slot.
    pub fn complete_batch(
        &self,
        requests: &[ChatRequest],
        batch_size: usize,
    ) -> Vec<Result<ChatResponse, GatewayError>> {
        let batch_size = batch_size.max(1);
        let mut out = Vec::with_capacity(requests.len());
        for wave in requests.chunks(batch_size) {
            let results: Vec<_> = std::thread::scope(|scope| {
                let handles: Vec<_> = wave.iter().map(|req| scope.spawn(move || self.complete(req))).collect();
                handles
                    .into_iter()
                    .map(|h| {
                        h.join().unwrap_or_else(|_| {
                            Err(GatewayError::Transport {
                                attempts: 0,
                                message: "worker panicked".into(),
                            })
                        })
                    })
                    .collect()
            });
            out.extend(results);
        }
        out
    }

    fn call_live(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let transport = self.transport.as_ref().ok_or(GatewayError::NoTransport)?;
        if let Some(limit) = self.max_live_calls {
            let used = self.live_calls.fetch_add(1, Ordering::SeqCst);
            if used >= limit {
                self.live_calls.fetch_sub(1, Ordering::SeqCst);
                return Err(GatewayError::CostGuard { limit });
            }
        } else {
            self.live_calls.fetch_add(1, Ordering::SeqCst);
        }
        let max_attempts = self.retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=max_attempts {
            let delay = self.retry.delay_before(attempt);
            if !delay.is_zero() {
                std::thread::sleep(delay);
            }
            let started = Instant::now();
            match transport.send(request) {
                Ok(mut response) => {
                    if response.latency_ms == 0 {
                        response.latency_ms = started.elapsed().as_millis() as u64;
                    }
                    if let Some(cap) = request.max_output_chars {
                        if response.content.chars().count() > cap {
                            response.content = response.content.chars().take(cap).collect();
                            response.finish_reason = FinishReason::Truncated;
                        }
                    }
                    return Ok(response);
                }
                Err(TransportError::Fatal(msg)) => {
                    return Err(GatewayError::Transport {
                        attempts: attempt,
                        message: msg,
                    })
                }
                Err(TransportError::Transient(msg)) => {
                    log::warn!(
                        "{}: transient failure on attempt {attempt}/{max_attempts}: {msg}",
                        request.request_tag
                    );
                    last = msg;
                }
            }
        }
        Err(GatewayError::Transport {
            attempts: max_attempts,
            message: last,
        })
    }
}

/// OpenAI-compatible `/chat/completions` client.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: String,
}

impl HttpTransport {
    pub fn new(
        base_url: impl Into<String>,
        api_key: impl Into<String>,
        timeout: Duration,
    ) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::InvalidRequest(e.to_string()))?;
        Ok(Self {
            client,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
        })
    }
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

impl Transport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        let started = Instant::now();
        let body = serde_json::json!({
            "model": request.model,
            "temperature": request.temperature,
            "messages": request.messages,
        });
        let resp = self
            .client
            .post(format!("{}/chat/completions", self.base_url))
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(TransportError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(TransportError::Fatal(format!("HTTP {status}: {text}")));
        }
        let wire: WireResponse = resp
            .json()
            .map_err(|e| TransportError::Fatal(format!("malformed provider response: {e}")))?;
        let choice = wire
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| TransportError::Fatal("provider returned no choices".into()))?;
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Truncated,
            _ => FinishReason::Complete,
        };
        Ok(ChatResponse {
            content: choice.message.content.unwrap_or_default(),
            finish_reason,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}
