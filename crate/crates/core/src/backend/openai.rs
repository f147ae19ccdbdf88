use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{BackendConfig, BackendError, ChatBackend, ChatRequest, ChatResponse};

/// OpenAI-compatible `/chat/completions` client (vLLM, TGI, hosted APIs).
pub struct OpenAiBackend {
    agent: ureq::Agent,
    url: String,
    credential: Option<String>,
    extra: serde_json::Map<String, Value>,
}

impl OpenAiBackend {
    pub fn new(config: &BackendConfig) -> Result<Self, BackendError> {
        if config.endpoint_url.is_empty() {
            return Err(BackendError::Config("endpoint_url is empty".into()));
        }
        let credential = match &config.credential_env {
            Some(var) => match std::env::var(var) {
                Ok(v) if !v.is_empty() => Some(v),
                _ => {
                    log::warn!("{var} is not set; sending requests without a bearer token");
                    None
                }
            },
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(OpenAiBackend {
            agent,
            url: format!("{}/chat/completions", config.endpoint_url.trim_end_matches('/')),
            credential,
            extra: config.extra.clone(),
        })
    }

    fn body(&self, request: &ChatRequest) -> Value {
        let mut body = json!({
            "model": request.model_id,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        });
        let map = body.as_object_mut().expect("object literal");
        for (k, v) in &self.extra {
            map.insert(k.clone(), v.clone());
        }
        body
    }
}

fn looks_like_context_error(body: &str) -> bool {
    let lower = body.to_lowercase();
    lower.contains("context length") || lower.contains("maximum context")
}

pub(crate) fn parse_completion(body: &Value) -> Result<(String, u64, u64), BackendError> {
    let text = body
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::MalformedResponse("missing choices[0].message.content".into()))?;
    let usage = |k: &str| {
        body.pointer(&format!("/usage/{k}"))
            .and_then(Value::as_u64)
            .unwrap_or(0)
    };
    Ok((text.to_string(), usage("prompt_tokens"), usage("completion_tokens")))
}

impl ChatBackend for OpenAiBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let started = Instant::now();
        let mut call = self.agent.post(&self.url);
        if let Some(token) = &self.credential {
            call = call.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = call
            .send_json(self.body(request))
            .map_err(|e| BackendError::Transport {
                message: e.to_string(),
                transient: true,
            })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport {
                message: e.to_string(),
                transient: true,
            })?;
        if !(200..300).contains(&status) {
            if status == 400 && looks_like_context_error(&text) {
                return Err(BackendError::ContextOverflow {
                    estimated: 0,
                    limit: 0,
                });
            }
            let mut snippet: String = text.chars().take(300).collect();
            if snippet.len() < text.len() {
                snippet.push_str("...");
            }
            return Err(BackendError::Transport {
                message: format!("HTTP {status}: {snippet}"),
                transient: status == 408 || status == 429 || status >= 500,
            });
        }
        let body: Value = serde_json::from_str(&text)
            .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        let (text, prompt_tokens, completion_tokens) = parse_completion(&body)?;
        Ok(ChatResponse {
            text,
            prompt_tokens,
            completion_tokens,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }

    fn is_live(&self) -> bool {
        true
    }
}
