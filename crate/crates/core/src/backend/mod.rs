//! Chat-completion transport shared by every attribution method.
//!
//! Methods talk to an [`LlmClient`], which owns the pre-flight context check,
//! transport retries and transcript recording. What answers the request is a
//! [`ChatBackend`]: a live OpenAI-compatible endpoint, a scripted table, or a
//! recorded transcript.

mod openai;
mod scripted;
mod transcript;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::trace::{CharHeuristic, TokenCounter};

pub use openai::OpenAiBackend;
pub use scripted::{ReplayBackend, ScriptEntry, ScriptedBackend};
pub use transcript::{read_transcript, Transcript, TranscriptEntry, TranscriptRecorder};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("estimated prompt of {estimated} tokens exceeds context limit {limit}")]
    ContextOverflow { estimated: usize, limit: usize },
    #[error("transport error: {message}")]
    Transport { message: String, transient: bool },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("no scripted response for record {record_id:?}, tag {tag:?}")]
    MissingScriptEntry { record_id: String, tag: String },
    #[error("replayed request for record {record_id:?}, tag {tag:?} differs from the recording")]
    ReplayMismatch { record_id: String, tag: String },
    #[error("invalid backend setup: {0}")]
    Config(String),
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
        Message {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    /// Record the request is made for; scripted backends key on it.
    pub record_id: String,
    /// Pipeline stage label, e.g. `judge/iter=1`.
    pub tag: String,
    pub model_id: String,
    pub messages: Vec<Message>,
    pub max_output_tokens: u32,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
}

/// Something that answers chat requests.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;

    /// `true` when calls leave the process.
    fn is_live(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Sleep before attempt `i + 1`; the last value repeats if attempts outnumber it.
    pub backoff_ms: Vec<u64>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            backoff_ms: vec![1_000, 4_000, 16_000],
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy {
            max_attempts: 1,
            backoff_ms: Vec::new(),
        }
    }

    fn delay_before_retry(&self, retry_index: usize) -> Duration {
        let ms = self
            .backoff_ms
            .get(retry_index)
            .or(self.backoff_ms.last())
            .copied()
            .unwrap_or(0);
        Duration::from_millis(ms)
    }
}

fn default_context_limit() -> usize {
    128_000
}

fn default_max_output() -> u32 {
    4_096
}

fn default_timeout() -> u64 {
    600
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    #[serde(default)]
    pub endpoint_url: String,
    #[serde(default)]
    pub model_id: String,
    /// Name of the environment variable holding the bearer credential.
    #[serde(default)]
    pub credential_env: Option<String>,
    #[serde(default = "default_context_limit")]
    pub context_limit_tokens: usize,
    #[serde(default = "default_max_output")]
    pub max_output_tokens: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout")]
    pub timeout_s: u64,
    /// Passed through verbatim into the request body (e.g. `reasoning_effort`).
    #[serde(default)]
    pub extra: Map<String, Value>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            endpoint_url: String::from("http://localhost:8000/v1"),
            model_id: String::new(),
            credential_env: Some(String::from("OPENAI_API_KEY")),
            context_limit_tokens: default_context_limit(),
            max_output_tokens: default_max_output(),
            temperature: 0.0,
            retry: RetryPolicy::default(),
            timeout_s: default_timeout(),
            extra: Map::new(),
        }
    }
}

impl BackendConfig {
    /// Built-in model profiles: greedy decoding, 128k context except Mixtral (64k),
    /// and low reasoning effort for gpt-oss.
    pub fn profile(name: &str) -> Option<Self> {
        let mut cfg = BackendConfig::default();
        match name {
            "default" => {}
            "llama-3.3-70b" => cfg.model_id = "meta-llama/Llama-3.3-70B-Instruct".into(),
            "llama-3.1-8b" => cfg.model_id = "meta-llama/Llama-3.1-8B-Instruct".into(),
            "mixtral-8x22b" => {
                cfg.model_id = "mistralai/Mixtral-8x22B-Instruct-v0.1".into();
                cfg.context_limit_tokens = 64_000;
            }
            "gpt-oss-20b" => {
                cfg.model_id = "openai/gpt-oss-20b".into();
                cfg.extra
                    .insert("reasoning_effort".into(), Value::String("low".into()));
            }
            _ => return None,
        }
        Some(cfg)
    }

    pub fn profile_names() -> &'static [&'static str] {
        &[
            "default",
            "llama-3.3-70b",
            "llama-3.1-8b",
            "mixtral-8x22b",
            "gpt-oss-20b",
        ]
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.context_limit_tokens == 0 {
            return Err(BackendError::Config("context_limit_tokens must be positive".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(BackendError::Config("retry.max_attempts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Front door for every LLM call a method makes.
#[derive(Clone)]
pub struct LlmClient {
    backend: Arc<dyn ChatBackend>,
    config: BackendConfig,
    counter: Arc<dyn TokenCounter>,
    recorder: Option<Arc<TranscriptRecorder>>,
}

impl LlmClient {
    pub fn new(backend: Arc<dyn ChatBackend>, config: BackendConfig) -> Self {
        LlmClient {
            backend,
            config,
            counter: Arc::new(CharHeuristic),
            recorder: None,
        }
    }

    pub fn with_counter(mut self, counter: Arc<dyn TokenCounter>) -> Self {
        self.counter = counter;
        self
    }

    pub fn with_recorder(mut self, recorder: Arc<TranscriptRecorder>) -> Self {
        self.recorder = Some(recorder);
        self
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn recorder(&self) -> Option<&Arc<TranscriptRecorder>> {
        self.recorder.as_ref()
    }

    pub fn estimate_prompt_tokens(&self, messages: &[Message]) -> usize {
        messages.iter().map(|m| self.counter.count(&m.content)).sum()
    }

    /// Builds a request with this client's model and decoding settings.
    pub fn request(&self, record_id: &str, tag: &str, messages: Vec<Message>) -> ChatRequest {
        ChatRequest {
            record_id: record_id.to_string(),
            tag: tag.to_string(),
            model_id: self.config.model_id.clone(),
            messages,
            max_output_tokens: self.config.max_output_tokens,
            temperature: self.config.temperature,
        }
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let estimated = self.estimate_prompt_tokens(&request.messages);
        if estimated > self.config.context_limit_tokens {
            return Err(BackendError::ContextOverflow {
                estimated,
                limit: self.config.context_limit_tokens,
            });
        }
        let mut attempt = 0u32;
        let response = loop {
            attempt += 1;
            match self.backend.complete(request) {
                Err(BackendError::Transport { message, transient })
                    if transient && attempt < self.config.retry.max_attempts =>
                {
                    log::warn!(
                        "{} {}: attempt {attempt} failed ({message}); retrying",
                        request.record_id,
                        request.tag
                    );
                    std::thread::sleep(
                        self.config.retry.delay_before_retry(attempt as usize - 1),
                    );
                }
                other => break other?,
            }
        };
        if let Some(rec) = &self.recorder {
            rec.append(request, &response);
        }
        Ok(response)
    }
}
