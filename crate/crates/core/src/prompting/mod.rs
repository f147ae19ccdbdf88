//! Prompt assets, rendering, and parsing of model output.
//!
//! Templates live under `templates/` as text files: a small `key: value`
//! header, a `---` line, then the body exactly as the prompt should read.
//! `syntax: braces` bodies use `{name}` placeholders with `{{`/`}}` escapes;
//! `syntax: literal` bodies are inserted as-is.

mod parse;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::trace::Trajectory;

pub use parse::{
    parse_structured, parse_tool_call, Judgement, ParseError, ParseOutcome, ParsedAnswer,
    ParsedEvaluation, ParsedJudgment, ParsedVerdict, RepairKind, Schema, ToolCall,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("template {template}: placeholder {{{name}}} is unbound")]
    UnboundPlaceholder { template: String, name: String },
    #[error("template {template}: {reason}")]
    MalformedTemplate { template: String, reason: String },
    #[error("cannot render a prompt for an empty trajectory")]
    EmptyTrajectory,
    #[error("step {step} is outside a {len}-step trajectory")]
    StepOutOfRange { step: usize, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Syntax {
    Braces,
    Literal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub version: u32,
    pub syntax: Syntax,
    pub required_placeholders: BTreeSet<String>,
    pub note: Option<String>,
    pub body: String,
}

enum Piece<'a> {
    Text(&'a str),
    Brace(char),
    Slot(&'a str),
}

/// Splits a braces body into text, escaped braces and placeholder slots.
fn lex<'a>(template: &str, body: &'a str) -> Result<Vec<Piece<'a>>, PromptError> {
    let malformed = |reason: String| PromptError::MalformedTemplate {
        template: template.to_string(),
        reason,
    };
    let mut out = Vec::new();
    let bytes = body.as_bytes();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' | b'}' if bytes.get(i + 1) == Some(&bytes[i]) => {
                out.push(Piece::Text(&body[start..i]));
                out.push(Piece::Brace(bytes[i] as char));
                i += 2;
                start = i;
            }
            b'{' => {
                out.push(Piece::Text(&body[start..i]));
                let rest = &body[i + 1..];
                let end = rest
                    .find(['{', '}', '\n'])
                    .filter(|&e| rest.as_bytes()[e] == b'}')
                    .ok_or_else(|| malformed(format!("unclosed placeholder at byte {i}")))?;
                let name = &rest[..end];
                if name.trim().is_empty() {
                    return Err(malformed(format!("empty placeholder at byte {i}")));
                }
                out.push(Piece::Slot(name));
                i += end + 2;
                start = i;
            }
            b'}' => return Err(malformed(format!("stray '}}' at byte {i}"))),
            _ => i += 1,
        }
    }
    out.push(Piece::Text(&body[start..]));
    Ok(out)
}

impl PromptTemplate {
    pub fn parse_asset(text: &str) -> Result<Self, PromptError> {
        let (head, body) = text
            .split_once("\n---\n")
            .ok_or_else(|| PromptError::MalformedTemplate {
                template: String::from("?"),
                reason: String::from("missing '---' header separator"),
            })?;
        let fields: BTreeMap<&str, &str> = head
            .lines()
            .filter_map(|l| l.split_once(':'))
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        let name = fields.get("name").copied().unwrap_or("?").to_string();
        let malformed = |reason: &str| PromptError::MalformedTemplate {
            template: name.clone(),
            reason: reason.to_string(),
        };
        let version = fields
            .get("version")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| malformed("missing or bad version"))?;
        let syntax = match fields.get("syntax").copied() {
            Some("braces") => Syntax::Braces,
            Some("literal") => Syntax::Literal,
            _ => return Err(malformed("syntax must be 'braces' or 'literal'")),
        };
        let required_placeholders = fields
            .get("placeholders")
            .map(|v| {
                v.split(", ")
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            })
            .unwrap_or_default();
        let body = body.strip_suffix('\n').unwrap_or(body).to_string();
        let t = PromptTemplate {
            name: name.clone(),
            version,
            syntax,
            required_placeholders,
            note: fields.get("note").map(|s| s.to_string()),
            body,
        };
        if t.placeholders()? != t.required_placeholders {
            return Err(malformed("declared placeholders differ from the body"));
        }
        Ok(t)
    }

    /// Placeholder names that occur in the body.
    pub fn placeholders(&self) -> Result<BTreeSet<String>, PromptError> {
        if self.syntax == Syntax::Literal {
            return Ok(BTreeSet::new());
        }
        Ok(lex(&self.name, &self.body)?
            .into_iter()
            .filter_map(|p| match p {
                Piece::Slot(s) => Some(s.to_string()),
                _ => None,
            })
            .collect())
    }

    pub fn render(&self, bindings: &[(&str, &str)]) -> Result<String, PromptError> {
        if self.syntax == Syntax::Literal {
            return Ok(self.body.clone());
        }
        let mut out = String::with_capacity(self.body.len());
        for piece in lex(&self.name, &self.body)? {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Brace(c) => out.push(c),
                Piece::Slot(name) => {
                    let value = bindings
                        .iter()
                        .find(|(k, _)| *k == name)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| PromptError::UnboundPlaceholder {
                            template: self.name.clone(),
                            name: name.to_string(),
                        })?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }

    /// `v<version>+<first 12 hex digits of the body's sha256>`.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.body.as_bytes());
        format!("v{}+{}", self.version, &hex::encode(digest)[..12])
    }
}

macro_rules! assets {
    ($($variant:ident => $file:literal),* $(,)?) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum TemplateId { $($variant),* }

        impl TemplateId {
            pub const ALL: &'static [TemplateId] = &[$(TemplateId::$variant),*];

            pub fn file_stem(self) -> &'static str {
                match self { $(TemplateId::$variant => $file),* }
            }

            fn asset(self) -> &'static str {
                match self {
                    $(TemplateId::$variant => include_str!(concat!("../../templates/", $file, ".txt"))),*
                }
            }
        }
    };
}

assets! {
    Wrapper => "wrapper",
    ChatLlm => "chat_llm",
    StepByStepInstruction => "step_by_step_instruction",
    StepByStepOutput => "step_by_step_output",
    BinarySearchInstruction => "binary_search_instruction",
    BinarySearchOutput => "binary_search_output",
    ToolCallerPlanner => "tool_caller_planner",
    ToolCallerJudge => "tool_caller_judge",
    JudgeInstruction => "judge_instruction",
    JudgeOutput => "judge_output",
    Evaluator1 => "evaluator_1",
    Evaluator2 => "evaluator_2",
    Evaluator3 => "evaluator_3",
}

/// The parsed, embedded template for `id`.
pub fn template(id: TemplateId) -> &'static PromptTemplate {
    static CACHE: OnceLock<Vec<PromptTemplate>> = OnceLock::new();
    let all = CACHE.get_or_init(|| {
        TemplateId::ALL
            .iter()
            .map(|id| {
                PromptTemplate::parse_asset(id.asset())
                    .unwrap_or_else(|e| panic!("embedded template {}: {e}", id.file_stem()))
            })
            .collect()
    });
    &all[TemplateId::ALL.iter().position(|x| *x == id).expect("listed")]
}

/// Template name to fingerprint, for run manifests.
pub fn template_versions() -> BTreeMap<String, String> {
    TemplateId::ALL
        .iter()
        .map(|id| (id.file_stem().to_string(), template(*id).fingerprint()))
        .collect()
}

/// Appended to the conversation when a reply could not be parsed.
pub const REPAIR_REMINDER: &str = "Your previous reply could not be parsed. \
Output only the json block in the requested format and nothing else.";

fn wrap(description: &str, metadata: &str, output: &str) -> Result<String, PromptError> {
    template(TemplateId::Wrapper).render(&[
        ("task_description", description),
        ("input_metadata", metadata),
        ("task_output", output),
    ])
}

fn non_empty(traj: &Trajectory) -> Result<(), PromptError> {
    if traj.is_empty() {
        Err(PromptError::EmptyTrajectory)
    } else {
        Ok(())
    }
}

fn check_step(traj: &Trajectory, step: usize) -> Result<(), PromptError> {
    non_empty(traj)?;
    if step >= traj.len() {
        return Err(PromptError::StepOutOfRange {
            step,
            len: traj.len(),
        });
    }
    Ok(())
}

/// Problem statement followed by the rendered log.
pub fn task_context(traj: &Trajectory) -> String {
    format!(
        "Problem: {}\n\nConversation log:\n{}",
        traj.problem,
        traj.render_log()
    )
}

/// Judge prompt; `history_digest` carries evaluator feedback from earlier
/// iterations and is omitted on the first.
pub fn render_judge(traj: &Trajectory, history_digest: Option<&str>) -> Result<String, PromptError> {
    non_empty(traj)?;
    let mut metadata = task_context(traj);
    if let Some(digest) = history_digest.filter(|d| !d.trim().is_empty()) {
        metadata.push_str(
            "\n\nEarlier candidates and the evaluators' feedback on them (oldest first):\n",
        );
        metadata.push_str(digest);
    }
    let instruction = template(TemplateId::JudgeInstruction).render(&[])?;
    let output = template(TemplateId::JudgeOutput).render(&[])?;
    wrap(&instruction, &metadata, &output)
}

/// Which rationale an evaluator checks.
pub fn criterion_key(p: u8) -> &'static str {
    match p {
        1 => "mistake_reason",
        2 => "first_mistake",
        3 => "mistake_not_corrected",
        _ => panic!("evaluator index {p} is not 1, 2 or 3"),
    }
}

pub fn render_evaluator(
    p: u8,
    traj: &Trajectory,
    judgment: &ParsedJudgment,
) -> Result<String, PromptError> {
    non_empty(traj)?;
    let (id, rationale) = match p {
        1 => (TemplateId::Evaluator1, &judgment.mistake_reason),
        2 => (TemplateId::Evaluator2, &judgment.first_mistake),
        3 => (TemplateId::Evaluator3, &judgment.mistake_not_corrected),
        _ => panic!("evaluator index {p} is not 1, 2 or 3"),
    };
    let mut error_step = serde_json::Map::new();
    error_step.insert("agent_name".into(), json!(judgment.agent_name));
    error_step.insert("step_number".into(), json!(judgment.step_number));
    error_step.insert(criterion_key(p).into(), json!(rationale));
    let error_step =
        serde_json::to_string_pretty(&error_step).expect("string map serializes");
    template(id).render(&[("task_log", &task_context(traj)), ("error_step", &error_step)])
}

/// Inputs for the four baseline methods' prompts.
#[derive(Debug, Clone, Copy)]
pub enum BaselinePrompt<'a> {
    ChatLlm {
        trajectory: &'a Trajectory,
    },
    /// Judges the latest step of the prefix `0..=step`.
    StepByStep {
        trajectory: &'a Trajectory,
        step: usize,
    },
    /// Segment `[lo, hi]` split into `[lo, mid]` and `[mid + 1, hi]`.
    BinarySearch {
        trajectory: &'a Trajectory,
        lo: usize,
        mid: usize,
        hi: usize,
    },
    ToolCallerPlanner {
        trajectory: &'a Trajectory,
    },
    ToolCallerJudge {
        trajectory: &'a Trajectory,
        step: usize,
    },
}

pub fn format_range(lo: usize, hi: usize) -> String {
    format!("[{lo}, {hi}]")
}

pub fn render_baseline(prompt: &BaselinePrompt<'_>) -> Result<String, PromptError> {
    match *prompt {
        BaselinePrompt::ChatLlm { trajectory } => {
            non_empty(trajectory)?;
            template(TemplateId::ChatLlm).render(&[
                ("problem", &trajectory.problem),
                ("failure_log", &trajectory.render_log()),
            ])
        }
        BaselinePrompt::StepByStep { trajectory, step } => {
            check_step(trajectory, step)?;
            let metadata = format!(
                "problem: {}\n\nhistory_up_to_step:\n{}",
                trajectory.problem,
                trajectory.render_prefix(step)
            );
            wrap(
                &template(TemplateId::StepByStepInstruction).render(&[])?,
                &metadata,
                &template(TemplateId::StepByStepOutput).render(&[])?,
            )
        }
        BaselinePrompt::BinarySearch {
            trajectory,
            lo,
            mid,
            hi,
        } => {
            check_step(trajectory, hi)?;
            assert!(lo <= mid && mid < hi, "bad split {lo}..{mid}..{hi}");
            let instruction = template(TemplateId::BinarySearchInstruction).render(&[
                ("lower_half_range", &format_range(lo, mid)),
                ("upper_half_range", &format_range(mid + 1, hi)),
            ])?;
            let metadata = format!(
                "problem: {}\n\nconversation segment {}:\n{}",
                trajectory.problem,
                format_range(lo, hi),
                trajectory.render_range(lo, hi)
            );
            wrap(
                &instruction,
                &metadata,
                &template(TemplateId::BinarySearchOutput).render(&[])?,
            )
        }
        BaselinePrompt::ToolCallerPlanner { trajectory } => {
            non_empty(trajectory)?;
            template(TemplateId::ToolCallerPlanner)
                .render(&[("input_data['metadata']", &task_context(trajectory))])
        }
        BaselinePrompt::ToolCallerJudge { trajectory, step } => {
            check_step(trajectory, step)?;
            let history = format!(
                "problem: {}\n{}",
                trajectory.problem,
                trajectory.render_prefix(step)
            );
            template(TemplateId::ToolCallerJudge).render(&[("prompt_history", &history)])
        }
    }
}

/// The planner's catalogue of callable agents, sent as the system message.
pub fn tool_caller_agent_list(n_steps: usize) -> String {
    let agents = json!([{
        "name": "judge",
        "description": "Decides whether the step with the given id is the step that makes \
the pipeline fail, looking at the conversation history up to and including that step. \
Returns a yes/no judgement and a reason.",
        "parameters": {
            "id": {
                "type": "integer",
                "description": format!("0-based step index, between 0 and {}", n_steps.saturating_sub(1))
            }
        }
    }]);
    serde_json::to_string_pretty(&agents).expect("literal serializes")
}

/// Planner-visible record of one judge call.
pub fn tool_result_message(call: &str, verdict: &str, reason: &str) -> String {
    let body = json!({ "judgement": verdict, "reason": reason });
    format!("{call} returned:\n{body}")
}

pub fn tool_error_message(detail: &str) -> String {
    format!("That agent call could not be executed: {detail}")
}

pub fn forced_answer_message(max_calls: usize) -> String {
    format!(
        "You have used all {max_calls} allowed agent calls. Do not call any more agents. \
Give your final answer now as the json block described above (Option B)."
    )
}
