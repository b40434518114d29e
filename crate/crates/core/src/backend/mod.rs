//! Access to the external model capabilities: text chat, audio captioning,
//! audio question answering and transcription.
//!
//! A [`ModelBackend`] performs single attempts. [`ModelClient`] wraps one with
//! the retry policy from its [`BackendConfig`], a shared concurrency cap and
//! per-call [`BackendCallRecord`]s.

mod mock;
mod openai;
mod registry;
mod retry;

use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evidence::AudioRef;

pub use mock::{FailKind, MockEntry, MockScript, ScriptedBackend};
pub use openai::OpenAiCompatibleBackend;
pub use registry::{BackendFactory, BackendRegistry};
pub use retry::backoff_delay;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("transport error: {message}")]
    Transport { message: String, retryable: bool },
    #[error("transport error after {attempts} attempt(s): {message}")]
    RetriesExhausted { message: String, attempts: u32 },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("audio unavailable: {0}")]
    AudioUnavailable(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend config: {0}")]
    Config(String),
}

impl BackendError {
    pub fn transient(message: impl Into<String>) -> Self {
        BackendError::Transport {
            message: message.into(),
            retryable: true,
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport { retryable: true, .. })
    }

    /// Connectivity failures, as opposed to bad input or bad output.
    pub fn is_unreachable(&self) -> bool {
        matches!(
            self,
            BackendError::Transport { .. } | BackendError::RetriesExhausted { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Chat,
    AudioCaption,
    AudioQa,
    Transcribe,
}

impl Capability {
    pub fn as_str(self) -> &'static str {
        match self {
            Capability::Chat => "chat",
            Capability::AudioCaption => "audio_caption",
            Capability::AudioQa => "audio_qa",
            Capability::Transcribe => "transcribe",
        }
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

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

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Ask the server for a JSON-object response.
    #[serde(default)]
    pub response_hint: bool,
    /// Which agent issued the request. Recorded in traces, never sent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

impl ChatRequest {
    pub fn new(messages: Vec<Message>) -> Self {
        Self {
            messages,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: 1024,
            response_hint: false,
            tag: None,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        match self.messages.last() {
            None => Err(BackendError::InvalidRequest("chat request has no messages".into())),
            Some(m) if m.role != Role::User => Err(BackendError::InvalidRequest(
                "last chat message must come from the user".into(),
            )),
            _ if self.temperature.is_nan() || self.temperature < 0.0 => Err(BackendError::InvalidRequest(format!(
                "temperature must be non-negative, got {}",
                self.temperature
            ))),
            _ if self.max_tokens == 0 => Err(BackendError::InvalidRequest("max_tokens must be positive".into())),
            _ => Ok(()),
        }
    }
}

pub const DEFAULT_TEMPERATURE: f64 = 0.2;

/// One request to a backend.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendCall {
    Chat(ChatRequest),
    /// `prompt` is the full text sent with the audio; `instruction` is the
    /// focus of a guided re-caption, if any.
    AudioCaption {
        audio: AudioRef,
        prompt: String,
        instruction: Option<String>,
    },
    AudioQa {
        audio: AudioRef,
        prompt: String,
        query: String,
    },
    Transcribe {
        audio: AudioRef,
    },
}

impl BackendCall {
    pub fn capability(&self) -> Capability {
        match self {
            BackendCall::Chat(_) => Capability::Chat,
            BackendCall::AudioCaption { .. } => Capability::AudioCaption,
            BackendCall::AudioQa { .. } => Capability::AudioQa,
            BackendCall::Transcribe { .. } => Capability::Transcribe,
        }
    }

    pub fn tag(&self) -> Option<&str> {
        match self {
            BackendCall::Chat(req) => req.tag.as_deref(),
            _ => None,
        }
    }

    /// Short description stored in call records.
    pub fn summary(&self) -> String {
        match self {
            BackendCall::Chat(req) => {
                let last = req.messages.last().map(|m| m.content.as_str()).unwrap_or("");
                format!(
                    "{} message(s), tag={}, last user message {} chars",
                    req.messages.len(),
                    req.tag.as_deref().unwrap_or("-"),
                    last.chars().count()
                )
            }
            BackendCall::AudioCaption { audio, instruction, .. } => match instruction {
                Some(focus) => format!("caption {} focus={focus:?}", audio.uri),
                None => format!("caption {}", audio.uri),
            },
            BackendCall::AudioQa { audio, query, .. } => format!("qa {} query={query:?}", audio.uri),
            BackendCall::Transcribe { audio } => format!("transcribe {}", audio.uri),
        }
    }
}

/// Identifies the run a call belongs to, so stateful backends (the scripted
/// mock) can keep per-run state independent of scheduling.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct CallScope {
    pub sample_id: String,
    pub run_label: String,
}

impl CallScope {
    pub fn new(sample_id: impl Into<String>) -> Self {
        Self {
            sample_id: sample_id.into(),
            run_label: String::new(),
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.run_label = label.into();
        self
    }
}

/// A strategy that performs one attempt of a backend call.
pub trait ModelBackend: Send + Sync {
    fn name(&self) -> &str;

    fn invoke(&self, scope: &CallScope, cfg: &BackendConfig, call: &BackendCall) -> Result<String, BackendError>;
}

fn default_backend_kind() -> String {
    "openai".to_string()
}
fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> u64 {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    /// Registry name of the backend strategy.
    #[serde(default = "default_backend_kind")]
    pub kind: String,
    #[serde(default)]
    pub endpoint_url: String,
    #[serde(default)]
    pub model_id: String,
    /// Environment variable holding the API key. Empty means no credential.
    #[serde(default)]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_base_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: default_backend_kind(),
            endpoint_url: String::new(),
            model_id: String::new(),
            api_key_env: String::new(),
            timeout_s: default_timeout(),
            max_retries: default_retries(),
            backoff_base_ms: default_backoff(),
        }
    }
}

pub const MAX_RETRIES_LIMIT: u32 = 10;

impl BackendConfig {
    pub fn mock() -> Self {
        Self {
            kind: "mock".into(),
            model_id: "scripted".into(),
            backoff_base_ms: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_retries > MAX_RETRIES_LIMIT {
            return Err(BackendError::Config(format!(
                "max_retries {} exceeds {MAX_RETRIES_LIMIT}",
                self.max_retries
            )));
        }
        if !self.timeout_s.is_finite() || self.timeout_s <= 0.0 {
            return Err(BackendError::Config(format!(
                "timeout_s must be positive, got {}",
                self.timeout_s
            )));
        }
        if self.backoff_base_ms == 0 {
            return Err(BackendError::Config("backoff_base_ms must be positive".into()));
        }
        Ok(())
    }

    /// Reads the credential named by `api_key_env`.
    pub fn api_key(&self) -> Result<Option<String>, BackendError> {
        if self.api_key_env.is_empty() {
            return Ok(None);
        }
        match std::env::var(&self.api_key_env) {
            Ok(v) if !v.is_empty() => Ok(Some(v)),
            _ => Err(BackendError::Auth(format!(
                "environment variable {} is not set",
                self.api_key_env
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendCallRecord {
    pub capability: Capability,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    pub request: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    pub latency_ms: u64,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Bounds the number of in-flight backend requests across every client that
/// shares it.
#[derive(Debug)]
pub struct RequestLimiter {
    capacity: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

pub const DEFAULT_MAX_CONCURRENT_REQUESTS: usize = 8;

impl RequestLimiter {
    pub fn new(capacity: usize) -> Arc<Self> {
        Arc::new(Self {
            capacity: capacity.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn acquire(&self) -> RequestPermit<'_> {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.capacity {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        RequestPermit { limiter: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.in_flight.lock().unwrap_or_else(|e| e.into_inner())
    }
}

pub struct RequestPermit<'a> {
    limiter: &'a RequestLimiter,
}

impl Drop for RequestPermit<'_> {
    fn drop(&mut self) {
        let mut n = self.limiter.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.limiter.freed.notify_one();
    }
}

/// A backend plus its configuration and the shared request cap.
#[derive(Clone)]
pub struct ModelClient {
    backend: Arc<dyn ModelBackend>,
    cfg: BackendConfig,
    limiter: Arc<RequestLimiter>,
}

impl fmt::Debug for ModelClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelClient")
            .field("backend", &self.backend.name())
            .field("cfg", &self.cfg)
            .finish()
    }
}

impl ModelClient {
    pub fn new(
        backend: Arc<dyn ModelBackend>,
        cfg: BackendConfig,
        limiter: Arc<RequestLimiter>,
    ) -> Result<Self, BackendError> {
        cfg.validate()?;
        Ok(Self { backend, cfg, limiter })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    /// Runs `call` with retries and appends exactly one record to `log` once
    /// the request has passed validation.
    pub fn execute(
        &self,
        scope: &CallScope,
        call: &BackendCall,
        log: &mut Vec<BackendCallRecord>,
    ) -> Result<String, BackendError> {
        // Requests rejected before any attempt leave no record.
        self.precheck(call)?;
        let started = Instant::now();
        let (result, attempts) = retry::with_retries(&self.cfg, |_| {
            let _permit = self.limiter.acquire();
            self.backend.invoke(scope, &self.cfg, call)
        });
        let result = result.and_then(|text| self.postcheck(call, text));
        log.push(BackendCallRecord {
            capability: call.capability(),
            tag: call.tag().map(str::to_string),
            request: call.summary(),
            response: result.as_ref().ok().cloned(),
            latency_ms: started.elapsed().as_millis() as u64,
            attempts,
            error: result.as_ref().err().map(|e| e.to_string()),
        });
        result
    }

    fn precheck(&self, call: &BackendCall) -> Result<(), BackendError> {
        match call {
            BackendCall::Chat(req) => req.validate(),
            BackendCall::AudioQa { query, .. } if query.trim().is_empty() => {
                Err(BackendError::InvalidRequest("audio query is empty".into()))
            }
            _ => Ok(()),
        }
    }

    fn postcheck(&self, call: &BackendCall, text: String) -> Result<String, BackendError> {
        // An empty transcript is a legitimate answer for speech-free audio.
        if text.trim().is_empty() && call.capability() != Capability::Transcribe {
            return Err(BackendError::MalformedResponse(format!(
                "{} returned an empty reply",
                call.capability()
            )));
        }
        Ok(text)
    }

    pub fn chat(
        &self,
        scope: &CallScope,
        req: ChatRequest,
        log: &mut Vec<BackendCallRecord>,
    ) -> Result<String, BackendError> {
        self.execute(scope, &BackendCall::Chat(req), log)
    }

    pub fn audio_caption(
        &self,
        scope: &CallScope,
        audio: &AudioRef,
        prompt: String,
        instruction: Option<String>,
        log: &mut Vec<BackendCallRecord>,
    ) -> Result<String, BackendError> {
        let call = BackendCall::AudioCaption {
            audio: audio.clone(),
            prompt,
            instruction,
        };
        self.execute(scope, &call, log)
    }

    pub fn audio_qa(
        &self,
        scope: &CallScope,
        audio: &AudioRef,
        prompt: String,
        query: String,
        log: &mut Vec<BackendCallRecord>,
    ) -> Result<String, BackendError> {
        let call = BackendCall::AudioQa {
            audio: audio.clone(),
            prompt,
            query,
        };
        self.execute(scope, &call, log)
    }

    pub fn transcribe(
        &self,
        scope: &CallScope,
        audio: &AudioRef,
        log: &mut Vec<BackendCallRecord>,
    ) -> Result<String, BackendError> {
        self.execute(scope, &BackendCall::Transcribe { audio: audio.clone() }, log)
    }
}
