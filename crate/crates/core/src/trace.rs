//! Trajectory data model and Who&When log ingestion.
//!
//! A record file is a JSON document with these keys (pinned from the public
//! corpus layout):
//!
//! | key              | required | notes                                             |
//! |------------------|----------|---------------------------------------------------|
//! | `question`       | yes      | the originating problem statement                 |
//! | `history`        | yes      | non-empty array of `{content, name?, role?}`      |
//! | `mistake_agent`  | yes      | annotated faulty agent                            |
//! | `mistake_step`   | yes      | integer, or integer serialized as a string        |
//! | `mistake_reason` | no       |                                                   |
//! | `ground_truth`   | no       | never exposed to attribution methods              |
//! | `is_correct`     | no       | final outcome of the run                          |
//!
//! The acting agent of a history entry is its `name` when present and
//! non-empty, otherwise its `role` (the Hand-Crafted subset only carries
//! `role`).

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("malformed record {record_id}: {reason}")]
    MalformedRecord { record_id: String, reason: String },
    #[error("record {record_id}: mistake_step {raw:?} is not a non-negative integer")]
    NonIntegerStep { record_id: String, raw: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("need at least 4 records to assign quartiles, got {0}")]
    TooFewRecords(usize),
    #[error("duplicate record id {0}")]
    DuplicateRecordId(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub agent_name: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub problem: String,
    pub steps: Vec<Step>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_outcome: Option<bool>,
}

impl Trajectory {
    /// Builds a trajectory from `(agent, content)` pairs, assigning 0-based indices.
    pub fn from_pairs<A, C, I>(problem: impl Into<String>, pairs: I) -> Self
    where
        A: Into<String>,
        C: Into<String>,
        I: IntoIterator<Item = (A, C)>,
    {
        let steps = pairs
            .into_iter()
            .enumerate()
            .map(|(index, (agent, content))| Step {
                index,
                agent_name: agent.into(),
                content: content.into(),
            })
            .collect();
        Trajectory {
            problem: problem.into(),
            steps,
            final_outcome: None,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn agent_at(&self, step: usize) -> Option<&str> {
        self.steps.get(step).map(|s| s.agent_name.as_str())
    }

    /// The log text shown to every method, one numbered line block per step.
    pub fn render_log(&self) -> String {
        self.render_range(0, self.steps.len().saturating_sub(1))
    }

    /// Renders steps `lo..=hi` (clamped to the trajectory).
    pub fn render_range(&self, lo: usize, hi: usize) -> String {
        let mut out = String::new();
        for step in self.steps.iter().skip(lo).take(hi.saturating_sub(lo) + 1) {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(&format!(
                "Step {} - {}: {}",
                step.index, step.agent_name, step.content
            ));
        }
        out
    }

    /// Steps `0..=t`, the prefix a sequential judge sees.
    pub fn render_prefix(&self, t: usize) -> String {
        self.render_range(0, t)
    }

    pub fn agent_names(&self) -> Vec<String> {
        let mut seen: Vec<String> = Vec::new();
        for s in &self.steps {
            if !seen.contains(&s.agent_name) {
                seen.push(s.agent_name.clone());
            }
        }
        seen
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthLabel {
    pub mistake_agent: String,
    pub mistake_step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mistake_reason: Option<String>,
}

/// One corpus entry. `ground_truth_answer` is kept for round-tripping only;
/// attribution methods receive `trajectory` alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub record_id: String,
    pub trajectory: Trajectory,
    pub label: GroundTruthLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_answer: Option<String>,
}

/// Canonical agent-name form used everywhere names are compared: trimmed,
/// case-folded, runs of whitespace and underscores collapsed to one `_`, and
/// a trailing parenthesized qualifier such as `Orchestrator (thought)` dropped.
pub fn normalize_agent(name: &str) -> String {
    let mut base = name.trim();
    if base.ends_with(')') {
        if let Some(open) = base.rfind('(') {
            let head = base[..open].trim_end();
            if !head.is_empty() {
                base = head;
            }
        }
    }
    let mut out = String::with_capacity(base.len());
    let mut in_sep = false;
    for ch in base.chars() {
        if ch.is_whitespace() || ch == '_' {
            if !in_sep {
                out.push('_');
            }
            in_sep = true;
        } else {
            in_sep = false;
            out.extend(ch.to_lowercase());
        }
    }
    out
}

pub fn agents_match(a: &str, b: &str) -> bool {
    normalize_agent(a) == normalize_agent(b)
}

fn malformed(record_id: &str, reason: impl Into<String>) -> TraceError {
    TraceError::MalformedRecord {
        record_id: record_id.to_string(),
        reason: reason.into(),
    }
}

fn parse_step_value(record_id: &str, v: &Value) -> Result<usize, TraceError> {
    let bad = || TraceError::NonIntegerStep {
        record_id: record_id.to_string(),
        raw: v.to_string(),
    };
    match v {
        Value::Number(n) => n.as_u64().map(|n| n as usize).ok_or_else(bad),
        Value::String(s) => s.trim().parse::<usize>().map_err(|_| bad()),
        _ => Err(bad()),
    }
}

fn opt_string(obj: &Map<String, Value>, key: &str) -> Option<String> {
    match obj.get(key) {
        Some(Value::String(s)) => Some(s.clone()),
        Some(Value::Null) | None => None,
        Some(other) => Some(other.to_string()),
    }
}

/// Parses one Who&When-layout JSON document.
pub fn parse_record(raw: &str, record_id: &str) -> Result<DatasetRecord, TraceError> {
    let doc: Value =
        serde_json::from_str(raw).map_err(|e| malformed(record_id, format!("invalid JSON: {e}")))?;
    let obj = doc
        .as_object()
        .ok_or_else(|| malformed(record_id, "top level is not an object"))?;

    let problem = match obj.get("question") {
        Some(Value::String(s)) => s.clone(),
        _ => return Err(malformed(record_id, "missing `question`")),
    };
    let history = obj
        .get("history")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed(record_id, "missing `history`"))?;
    if history.is_empty() {
        return Err(malformed(record_id, "empty `history`"));
    }

    let mut steps = Vec::with_capacity(history.len());
    for (index, entry) in history.iter().enumerate() {
        let entry = entry
            .as_object()
            .ok_or_else(|| malformed(record_id, format!("history[{index}] is not an object")))?;
        let agent = ["name", "role"]
            .iter()
            .filter_map(|k| entry.get(*k).and_then(Value::as_str))
            .map(str::trim)
            .find(|s| !s.is_empty())
            .ok_or_else(|| malformed(record_id, format!("history[{index}] has no agent name")))?;
        let content = opt_string(entry, "content").unwrap_or_default();
        steps.push(Step {
            index,
            agent_name: agent.to_string(),
            content,
        });
    }

    let mistake_agent = match obj.get("mistake_agent") {
        Some(Value::String(s)) => s.clone(),
        _ => return Err(malformed(record_id, "missing `mistake_agent`")),
    };
    let mistake_step = obj
        .get("mistake_step")
        .ok_or_else(|| malformed(record_id, "missing `mistake_step`"))
        .and_then(|v| parse_step_value(record_id, v))?;

    Ok(DatasetRecord {
        record_id: record_id.to_string(),
        trajectory: Trajectory {
            problem,
            steps,
            final_outcome: obj.get("is_correct").and_then(Value::as_bool),
        },
        label: GroundTruthLabel {
            mistake_agent,
            mistake_step,
            mistake_reason: opt_string(obj, "mistake_reason"),
        },
        ground_truth_answer: opt_string(obj, "ground_truth"),
    })
}

/// Canonical Who&When-layout serialization. Re-parsing yields an equal record.
pub fn serialize_record(record: &DatasetRecord) -> String {
    let mut obj = Map::new();
    if let Some(ok) = record.trajectory.final_outcome {
        obj.insert("is_correct".into(), Value::Bool(ok));
    }
    obj.insert("question".into(), Value::String(record.trajectory.problem.clone()));
    if let Some(gt) = &record.ground_truth_answer {
        obj.insert("ground_truth".into(), Value::String(gt.clone()));
    }
    let history = record
        .trajectory
        .steps
        .iter()
        .map(|s| {
            let mut e = Map::new();
            e.insert("content".into(), Value::String(s.content.clone()));
            e.insert("name".into(), Value::String(s.agent_name.clone()));
            Value::Object(e)
        })
        .collect();
    obj.insert("history".into(), Value::Array(history));
    obj.insert(
        "mistake_agent".into(),
        Value::String(record.label.mistake_agent.clone()),
    );
    obj.insert(
        "mistake_step".into(),
        Value::String(record.label.mistake_step.to_string()),
    );
    if let Some(reason) = &record.label.mistake_reason {
        obj.insert("mistake_reason".into(), Value::String(reason.clone()));
    }
    let mut out = serde_json::to_string_pretty(&Value::Object(obj)).expect("json values serialize");
    out.push('\n');
    out
}

/// Orders record ids numerically when both are integers, else lexically.
pub fn compare_record_ids(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

/// Result of loading a directory: every `.json` file lands in exactly one list.
#[derive(Debug, Default)]
pub struct LoadedDataset {
    pub records: Vec<DatasetRecord>,
    pub errors: Vec<TraceError>,
}

/// Loads every `*.json` file of `dir`, sorted by record id.
pub fn load_dataset_dir(dir: &Path) -> Result<LoadedDataset, TraceError> {
    let io_err = |path: &Path, e: std::io::Error| TraceError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut files: Vec<(String, std::path::PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        files.push((stem, path));
    }
    files.sort_by(|a, b| compare_record_ids(&a.0, &b.0));

    let mut out = LoadedDataset::default();
    for (stem, path) in files {
        let raw = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        match parse_record(&raw, &stem) {
            Ok(r) => out.records.push(r),
            Err(e) => out.errors.push(e),
        }
    }
    Ok(out)
}

/// Resolves `--subset` against a dataset root: the subset directory itself, or
/// a child directory whose name matches case-insensitively.
pub fn resolve_subset(root: &Path, subset: Option<&str>) -> std::path::PathBuf {
    let Some(subset) = subset else {
        return root.to_path_buf();
    };
    let direct = root.join(subset);
    if direct.is_dir() {
        return direct;
    }
    let wanted = normalize_agent(subset).replace('-', "_");
    if let Ok(entries) = fs::read_dir(root) {
        for e in entries.flatten() {
            let name = e.file_name().to_string_lossy().to_string();
            if normalize_agent(&name).replace('-', "_") == wanted && e.path().is_dir() {
                return e.path();
            }
        }
    }
    direct
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub record_id: String,
    pub is_consistent: bool,
    pub reason: String,
}

/// Checks the annotated `(agent, step)` against the log itself.
pub fn validate_label(record: &DatasetRecord) -> ConsistencyReport {
    let traj = &record.trajectory;
    let label = &record.label;
    let (is_consistent, reason) = match traj.agent_at(label.mistake_step) {
        None => (
            false,
            format!(
                "mistake_step {} out of range for {} steps",
                label.mistake_step,
                traj.len()
            ),
        ),
        Some(agent) if !agents_match(agent, &label.mistake_agent) => (
            false,
            format!(
                "mistake_agent {:?} but step {} was taken by {:?}",
                label.mistake_agent, label.mistake_step, agent
            ),
        ),
        Some(_) => (true, String::from("ok")),
    };
    ConsistencyReport {
        record_id: record.record_id.clone(),
        is_consistent,
        reason,
    }
}

/// Approximate token counting, shared by stats and backend pre-flight checks.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// `ceil(chars / 4)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct CharHeuristic;

impl TokenCounter for CharHeuristic {
    fn count(&self, text: &str) -> usize {
        text.chars().count().div_ceil(4)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_samples: usize,
    pub avg_steps: f64,
    pub avg_token_size: f64,
}

pub fn compute_stats(
    records: &[DatasetRecord],
    counter: &dyn TokenCounter,
) -> Result<DatasetStats, TraceError> {
    if records.is_empty() {
        return Err(TraceError::EmptyDataset);
    }
    let n = records.len() as f64;
    let steps: usize = records.iter().map(|r| r.trajectory.len()).sum();
    let tokens: usize = records
        .iter()
        .map(|r| counter.count(&r.trajectory.render_log()))
        .sum();
    Ok(DatasetStats {
        n_samples: records.len(),
        avg_steps: steps as f64 / n,
        avg_token_size: tokens as f64 / n,
    })
}

/// Splits records into token-length quartiles computed within this dataset.
///
/// Records are ranked by token count, ties broken by record id; rank `r` of
/// `n` falls in quartile `floor(4r / n) + 1`.
pub fn assign_length_quartiles(
    records: &[DatasetRecord],
    counter: &dyn TokenCounter,
) -> Result<BTreeMap<String, u8>, TraceError> {
    if records.len() < 4 {
        return Err(TraceError::TooFewRecords(records.len()));
    }
    let mut ranked: Vec<(usize, &str)> = records
        .iter()
        .map(|r| (counter.count(&r.trajectory.render_log()), r.record_id.as_str()))
        .collect();
    ranked.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| compare_record_ids(a.1, b.1)));
    let n = ranked.len();
    Ok(ranked
        .into_iter()
        .enumerate()
        .map(|(rank, (_, id))| (id.to_string(), (4 * rank / n) as u8 + 1))
        .collect())
}
