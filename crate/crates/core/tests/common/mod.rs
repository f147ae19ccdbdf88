#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use faultattr::attrib::MethodKind;
use faultattr::backend::{BackendConfig, LlmClient, RetryPolicy, ScriptEntry, ScriptedBackend};
use faultattr::trace::{DatasetRecord, Trajectory};

pub fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

pub fn client(script: ScriptedBackend) -> LlmClient {
    let cfg = BackendConfig {
        retry: RetryPolicy::none(),
        ..BackendConfig::default()
    };
    LlmClient::new(Arc::new(script), cfg)
}

pub const AGENTS: [&str; 3] = ["Planner", "WebSurfer", "Verification_Expert"];

pub fn trajectory(n: usize) -> Trajectory {
    Trajectory::from_pairs(
        "Which year was the bridge opened?",
        (0..n).map(|i| (AGENTS[i % 3], format!("turn {i}"))),
    )
}

pub fn judge(agent: &str, step: usize) -> String {
    format!(
        r#"{{"agent_name": "{agent}", "step_number": {step}, "mistake_reason": "m", "first_mistake": "f", "mistake_not_corrected": "n"}}"#
    )
}

pub fn eval(confidence: u32) -> String {
    format!(r#"{{"reason": "checked", "confidence": {confidence}}}"#)
}

pub fn verdict(j: &str) -> String {
    format!(r#"{{"judgement": "{j}", "reason": "because"}}"#)
}

pub fn answer(agent: &str, step: i64) -> String {
    format!(r#"{{"agent_name": "{agent}", "step_number": {step}, "reason_for_mistake": "r"}}"#)
}

/// Script answering every request `kind` makes on these records. Replies are
/// a pure function of record and tag.
pub fn full_script(records: &[DatasetRecord], kind: MethodKind) -> Vec<ScriptEntry> {
    let mut out = Vec::new();
    for r in records {
        let t = &r.trajectory;
        let n = t.len();
        let id = r.record_id.as_str();
        let seed: usize = id.bytes().map(|b| b as usize).sum();
        let mut put = |tag: String, text: String| {
            out.push(ScriptEntry {
                record_id: id.to_string(),
                tag,
                text,
            })
        };
        match kind {
            MethodKind::Raffles => {
                for k in 1..=4 {
                    let step = (seed + k) % n;
                    put(format!("judge/iter={k}"), judge(t.agent_at(step).unwrap(), step));
                    for p in 1..=3 {
                        put(format!("eval{p}/iter={k}"), eval(60 + ((seed * p + k * 7) % 40) as u32));
                    }
                }
            }
            MethodKind::ChatLlm => {
                let step = seed % n;
                put("chat_llm".into(), answer(t.agent_at(step).unwrap(), step as i64));
            }
            MethodKind::StepByStep => {
                for s in 0..n {
                    let j = if s == (seed % n) { "yes" } else { "no" };
                    put(format!("sbs/step={s}"), verdict(j));
                }
            }
            MethodKind::BinarySearch => {
                for q in 1..=8 {
                    let j = if (seed + q) % 2 == 0 { "upper half" } else { "lower half" };
                    put(format!("bs/query={q}"), verdict(j));
                }
            }
            MethodKind::ToolCaller => {
                let step = seed % n;
                put("tool/planner=1".into(), format!("<agent>judge(id={step})</agent>"));
                put("tool/judge=1".into(), verdict(if seed % 2 == 0 { "yes" } else { "no" }));
                put("tool/planner=2".into(), answer(t.agent_at(step).unwrap(), step as i64));
            }
        }
    }
    out
}

pub fn write_script(path: &Path, entries: &[ScriptEntry]) {
    let body: String = entries
        .iter()
        .map(|e| serde_json::to_string(e).unwrap() + "\n")
        .collect();
    std::fs::write(path, body).unwrap();
}
