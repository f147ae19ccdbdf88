use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, Transcript};
use crate::trace::{CharHeuristic, TokenCounter};

/// One line of a script file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub record_id: String,
    pub tag: String,
    pub text: String,
}

/// Answers from a fixed `(record_id, tag)` table. Token counts use the
/// character heuristic and latency is always zero.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    table: HashMap<(String, String), String>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, record_id: &str, tag: &str, text: impl Into<String>) -> Self {
        self.insert(record_id, tag, text);
        self
    }

    pub fn insert(&mut self, record_id: &str, tag: &str, text: impl Into<String>) {
        self.table
            .insert((record_id.to_string(), tag.to_string()), text.into());
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn from_entries(entries: impl IntoIterator<Item = ScriptEntry>) -> Self {
        let mut b = Self::new();
        for e in entries {
            b.insert(&e.record_id, &e.tag, e.text);
        }
        b
    }

    /// Loads a JSON-lines file of [`ScriptEntry`].
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ScriptEntry = serde_json::from_str(line).map_err(|e| {
                BackendError::Config(format!("{} line {}: {e}", path.display(), i + 1))
            })?;
            entries.push(e);
        }
        Ok(Self::from_entries(entries))
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let key = (request.record_id.clone(), request.tag.clone());
        let text = self
            .table
            .get(&key)
            .ok_or_else(|| BackendError::MissingScriptEntry {
                record_id: key.0.clone(),
                tag: key.1.clone(),
            })?;
        let counter = CharHeuristic;
        Ok(ChatResponse {
            text: text.clone(),
            prompt_tokens: request
                .messages
                .iter()
                .map(|m| counter.count(&m.content) as u64)
                .sum(),
            completion_tokens: counter.count(text) as u64,
            latency_ms: 0,
        })
    }
}

/// Serves responses from a recorded transcript, refusing requests whose
/// messages differ from what was recorded.
#[derive(Debug, Clone, Default)]
pub struct ReplayBackend {
    table: HashMap<(String, String), (ChatRequest, ChatResponse)>,
}

impl ReplayBackend {
    pub fn from_transcript(transcript: &Transcript) -> Self {
        let table = transcript
            .entries
            .iter()
            .map(|e| {
                (
                    (e.record_id.clone(), e.tag.clone()),
                    (e.request.clone(), e.response.clone()),
                )
            })
            .collect();
        ReplayBackend { table }
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let key = (request.record_id.clone(), request.tag.clone());
        let (recorded, response) =
            self.table
                .get(&key)
                .ok_or_else(|| BackendError::MissingScriptEntry {
                    record_id: key.0.clone(),
                    tag: key.1.clone(),
                })?;
        if recorded.messages != request.messages {
            return Err(BackendError::ReplayMismatch {
                record_id: key.0,
                tag: key.1,
            });
        }
        Ok(response.clone())
    }
}
