//! Attribution methods. Each one sees a record id (for request routing) and
//! the trajectory; labels never reach this module.

mod baselines;
mod raffles;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, LlmClient, Message};
use crate::prompting::{parse_structured, ParseError, ParseOutcome, RepairKind, Schema, REPAIR_REMINDER};
use crate::prompting::PromptError;
use crate::trace::Trajectory;

pub use baselines::{
    binary_search_attribute, chat_llm_attribute, step_by_step_attribute, tool_caller_attribute,
    BaselineTrace, BinaryQuery, StepJudgement, ToolCallRecord, ToolCallerConfig,
};
pub use raffles::{
    evaluator4_rule, history_digest, raffles_attribute, Candidate, HistoryEntry, RafflesConfig,
};

#[derive(Debug, Error)]
pub enum MethodError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("invalid method config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Raffles,
    ChatLlm,
    StepByStep,
    BinarySearch,
    ToolCaller,
}

impl MethodKind {
    pub const ALL: &'static [MethodKind] = &[
        MethodKind::Raffles,
        MethodKind::ChatLlm,
        MethodKind::StepByStep,
        MethodKind::BinarySearch,
        MethodKind::ToolCaller,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::Raffles => "raffles",
            MethodKind::ChatLlm => "chat_llm",
            MethodKind::StepByStep => "step_by_step",
            MethodKind::BinarySearch => "binary_search",
            MethodKind::ToolCaller => "tool_caller",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MethodKind::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s.replace('-', "_"))
            .ok_or_else(|| {
                let names: Vec<_> = MethodKind::ALL.iter().map(|m| m.as_str()).collect();
                format!("unknown method {s:?}; expected one of {}", names.join(", "))
            })
    }
}

/// How a run ended. `Completed` is used by the baselines when they return an
/// answer; RAFFLES uses `Converged` / `MaxIterations`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    MaxIterations,
    Completed,
    NoFaultFound,
    ParseFailure,
    ContextOverflow,
}

impl Status {
    pub const ALL: &'static [Status] = &[
        Status::Converged,
        Status::MaxIterations,
        Status::Completed,
        Status::NoFaultFound,
        Status::ParseFailure,
        Status::ContextOverflow,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Converged => "converged",
            Status::MaxIterations => "max_iterations",
            Status::Completed => "completed",
            Status::NoFaultFound => "no_fault_found",
            Status::ParseFailure => "parse_failure",
            Status::ContextOverflow => "context_overflow",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub agent_name: String,
    pub step_number: usize,
}

impl Prediction {
    pub fn new(agent_name: impl Into<String>, step_number: usize) -> Self {
        Prediction {
            agent_name: agent_name.into(),
            step_number,
        }
    }
}

/// Diagnostics for a stage whose reply needed repair or coercion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseRecord {
    pub tag: String,
    pub repair_applied: RepairKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ParseError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub method: MethodKind,
    pub record_id: String,
    #[serde(rename = "final")]
    pub final_prediction: Option<Prediction>,
    pub status: Status,
    pub llm_calls: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<HistoryEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<BaselineTrace>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub parses: Vec<ParseRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    #[serde(default)]
    pub raffles: RafflesConfig,
    #[serde(default)]
    pub tool_caller: ToolCallerConfig,
}

impl MethodConfig {
    pub fn validate(&self) -> Result<(), MethodError> {
        self.raffles.validate()?;
        self.tool_caller.validate()
    }
}

/// Runs `kind` on one trajectory.
pub fn attribute(
    kind: MethodKind,
    config: &MethodConfig,
    record_id: &str,
    trajectory: &Trajectory,
    client: &LlmClient,
) -> Result<AttributionResult, MethodError> {
    match kind {
        MethodKind::Raffles => raffles_attribute(record_id, trajectory, client, &config.raffles),
        MethodKind::ChatLlm => chat_llm_attribute(record_id, trajectory, client),
        MethodKind::StepByStep => step_by_step_attribute(record_id, trajectory, client),
        MethodKind::BinarySearch => binary_search_attribute(record_id, trajectory, client),
        MethodKind::ToolCaller => {
            tool_caller_attribute(record_id, trajectory, client, &config.tool_caller)
        }
    }
}

pub(crate) enum Asked<T> {
    Parsed(T),
    Failed(ParseError),
    Overflow,
}

/// Sends prompts for one record, counting calls and applying the single
/// re-ask repair.
pub(crate) struct Asker<'a> {
    client: &'a LlmClient,
    record_id: &'a str,
    pub calls: u32,
    pub parses: Vec<ParseRecord>,
}

impl<'a> Asker<'a> {
    pub fn new(client: &'a LlmClient, record_id: &'a str) -> Self {
        Asker {
            client,
            record_id,
            calls: 0,
            parses: Vec::new(),
        }
    }

    /// One completion; `None` on context overflow.
    pub fn send(&mut self, tag: &str, messages: Vec<Message>) -> Result<Option<String>, MethodError> {
        let request = self.client.request(self.record_id, tag, messages);
        match self.client.complete(&request) {
            Ok(resp) => {
                self.calls += 1;
                Ok(Some(resp.text))
            }
            Err(BackendError::ContextOverflow { estimated, limit }) => {
                log::warn!(
                    "{} {tag}: prompt of ~{estimated} tokens exceeds limit {limit}",
                    self.record_id
                );
                Ok(None)
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Sends `messages`, parses the reply with `parse`, and re-asks once with
    /// a format reminder if parsing fails. Returns the raw reply accepted.
    pub fn ask_with<T>(
        &mut self,
        tag: &str,
        messages: Vec<Message>,
        parse: impl Fn(&str) -> ParseOutcome<T>,
    ) -> Result<(Asked<T>, Option<String>), MethodError> {
        let Some(raw) = self.send(tag, messages.clone())? else {
            return Ok((Asked::Overflow, None));
        };
        let first = parse(&raw);
        if let Some(value) = first.value {
            self.note(tag, first.repair_applied, first.notes, None);
            return Ok((Asked::Parsed(value), Some(raw)));
        }
        self.note(tag, first.repair_applied, first.notes, first.error);

        let repair_tag = format!("{tag}/repair");
        let mut retry = messages;
        retry.push(Message::assistant(raw));
        retry.push(Message::user(REPAIR_REMINDER));
        let Some(raw) = self.send(&repair_tag, retry)? else {
            return Ok((Asked::Overflow, None));
        };
        let second = parse(&raw);
        match second.value {
            Some(value) => {
                self.note(&repair_tag, RepairKind::ReAsk, second.notes, None);
                Ok((Asked::Parsed(value), Some(raw)))
            }
            None => {
                let err = second.error.clone().unwrap_or(ParseError::UnparseableOutput);
                self.note(&repair_tag, RepairKind::ReAsk, second.notes, second.error);
                Ok((Asked::Failed(err), Some(raw)))
            }
        }
    }

    pub fn ask<T: Schema>(
        &mut self,
        tag: &str,
        messages: Vec<Message>,
    ) -> Result<Asked<T>, MethodError> {
        Ok(self.ask_with(tag, messages, parse_structured::<T>)?.0)
    }

    fn note(&mut self, tag: &str, repair: RepairKind, notes: Vec<String>, error: Option<ParseError>) {
        if repair != RepairKind::None || !notes.is_empty() || error.is_some() {
            self.parses.push(ParseRecord {
                tag: tag.to_string(),
                repair_applied: repair,
                notes,
                error,
            });
        }
    }
}
