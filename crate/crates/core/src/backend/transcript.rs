use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{BackendError, ChatRequest, ChatResponse};

/// One recorded exchange; serialized as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub run_id: String,
    pub seq: u64,
    pub record_id: String,
    pub tag: String,
    pub request: ChatRequest,
    pub response: ChatResponse,
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub run_id: String,
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    /// Entries with the wall-clock fields zeroed, for comparisons across runs.
    pub fn without_timing(&self) -> Vec<TranscriptEntry> {
        self.entries
            .iter()
            .cloned()
            .map(|mut e| {
                e.timestamp_ms = 0;
                e.response.latency_ms = 0;
                e
            })
            .collect()
    }
}

struct Inner {
    entries: Vec<TranscriptEntry>,
    sink: Option<File>,
}

/// Append-only transcript shared by concurrent workers.
pub struct TranscriptRecorder {
    run_id: String,
    inner: Mutex<Inner>,
}

impl TranscriptRecorder {
    pub fn in_memory(run_id: impl Into<String>) -> Self {
        TranscriptRecorder {
            run_id: run_id.into(),
            inner: Mutex::new(Inner {
                entries: Vec::new(),
                sink: None,
            }),
        }
    }

    /// Also appends every entry to `path` as it is recorded.
    pub fn to_file(run_id: impl Into<String>, path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let rec = Self::in_memory(run_id);
        rec.inner.lock().expect("recorder lock").sink = Some(file);
        Ok(rec)
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn append(&self, request: &ChatRequest, response: &ChatResponse) {
        let mut inner = self.inner.lock().expect("recorder lock");
        let entry = TranscriptEntry {
            run_id: self.run_id.clone(),
            seq: inner.entries.len() as u64,
            record_id: request.record_id.clone(),
            tag: request.tag.clone(),
            request: request.clone(),
            response: response.clone(),
            timestamp_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
        };
        if let Some(sink) = inner.sink.as_mut() {
            let line = serde_json::to_string(&entry).expect("entries serialize");
            if let Err(e) = writeln!(sink, "{line}").and_then(|_| sink.flush()) {
                log::error!("failed to persist transcript entry: {e}");
            }
        }
        inner.entries.push(entry);
    }

    pub fn snapshot(&self) -> Transcript {
        Transcript {
            run_id: self.run_id.clone(),
            entries: self.inner.lock().expect("recorder lock").entries.clone(),
        }
    }
}

/// Reads a line-delimited transcript, ignoring a truncated final line.
pub fn read_transcript(path: &Path) -> Result<Transcript, BackendError> {
    let file = File::open(path)
        .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
    let mut transcript = Transcript::default();
    let last = lines.len().saturating_sub(1);
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TranscriptEntry>(line) {
            Ok(e) => {
                if transcript.run_id.is_empty() {
                    transcript.run_id = e.run_id.clone();
                }
                transcript.entries.push(e);
            }
            Err(_) if i == last => log::warn!("ignoring truncated final transcript line"),
            Err(e) => {
                return Err(BackendError::Config(format!(
                    "{} line {}: {e}",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    Ok(transcript)
}
