use serde::{Deserialize, Serialize};

use super::{AttributionResult, Asked, Asker, MethodError, MethodKind, Prediction, Status};
use crate::backend::{LlmClient, Message};
use crate::prompting::{
    forced_answer_message, parse_structured, parse_tool_call, render_baseline,
    tool_caller_agent_list, tool_error_message, tool_result_message, BaselinePrompt, Judgement,
    ParseError, ParseOutcome, ParsedAnswer, ParsedVerdict, RepairKind, ToolCall,
};
use crate::trace::{agents_match, Trajectory};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepJudgement {
    pub step: usize,
    /// `None` when the reply could not be read; such steps count as "no".
    pub judgement: Option<Judgement>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryQuery {
    pub lo: usize,
    pub mid: usize,
    pub hi: usize,
    pub judgement: Judgement,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCallRecord {
    pub call: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judgement: Option<Judgement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub refused: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineTrace {
    ChatLlm {
        reason: String,
    },
    StepByStep {
        steps: Vec<StepJudgement>,
        unparsed_steps: usize,
    },
    BinarySearch {
        queries: Vec<BinaryQuery>,
    },
    ToolCaller {
        calls: Vec<ToolCallRecord>,
        forced_answer: bool,
        #[serde(default, skip_serializing_if = "String::is_empty")]
        reason: String,
    },
}

fn result(
    method: MethodKind,
    record_id: &str,
    asker: Asker,
    status: Status,
    final_prediction: Option<Prediction>,
    trace: BaselineTrace,
) -> AttributionResult {
    AttributionResult {
        method,
        record_id: record_id.to_string(),
        final_prediction,
        status,
        llm_calls: asker.calls,
        history: Vec::new(),
        trace: Some(trace),
        parses: asker.parses,
    }
}

/// Maps a final answer to a prediction; a negative step or "no mistake"
/// means the method found nothing.
fn answer_prediction(answer: &ParsedAnswer) -> Option<Prediction> {
    let step = usize::try_from(answer.step_number).ok()?;
    if agents_match(&answer.agent_name, "no mistake") {
        return None;
    }
    Some(Prediction::new(&answer.agent_name, step))
}

pub fn chat_llm_attribute(
    record_id: &str,
    trajectory: &Trajectory,
    client: &LlmClient,
) -> Result<AttributionResult, MethodError> {
    let prompt = render_baseline(&BaselinePrompt::ChatLlm { trajectory })?;
    let mut asker = Asker::new(client, record_id);
    let asked = asker.ask::<ParsedAnswer>("chat_llm", vec![Message::user(prompt)])?;
    let (status, pred, reason) = match asked {
        Asked::Parsed(a) => match answer_prediction(&a) {
            Some(p) => (Status::Completed, Some(p), a.reason),
            None => (Status::NoFaultFound, None, a.reason),
        },
        Asked::Failed(_) => (Status::ParseFailure, None, String::new()),
        Asked::Overflow => (Status::ContextOverflow, None, String::new()),
    };
    Ok(result(
        MethodKind::ChatLlm,
        record_id,
        asker,
        status,
        pred,
        BaselineTrace::ChatLlm { reason },
    ))
}

pub fn step_by_step_attribute(
    record_id: &str,
    trajectory: &Trajectory,
    client: &LlmClient,
) -> Result<AttributionResult, MethodError> {
    let mut asker = Asker::new(client, record_id);
    let mut steps = Vec::new();
    let mut unparsed = 0;
    let agent = |t: usize| trajectory.agent_at(t).unwrap_or_default().to_string();
    for t in 0..trajectory.len() {
        let prompt = render_baseline(&BaselinePrompt::StepByStep {
            trajectory,
            step: t,
        })?;
        let (judgement, reason) =
            match asker.ask::<ParsedVerdict>(&format!("sbs/step={t}"), vec![Message::user(prompt)])? {
                Asked::Parsed(v) => (Some(v.judgement), v.reason),
                Asked::Failed(e) => (None, e.to_string()),
                Asked::Overflow => {
                    let trace = BaselineTrace::StepByStep {
                        steps,
                        unparsed_steps: unparsed,
                    };
                    return Ok(result(
                        MethodKind::StepByStep,
                        record_id,
                        asker,
                        Status::ContextOverflow,
                        None,
                        trace,
                    ));
                }
            };
        let is_yes = judgement == Some(Judgement::Yes);
        if !matches!(judgement, Some(Judgement::Yes) | Some(Judgement::No)) {
            unparsed += 1;
        }
        steps.push(StepJudgement {
            step: t,
            judgement,
            reason,
        });
        if is_yes {
            let trace = BaselineTrace::StepByStep {
                steps,
                unparsed_steps: unparsed,
            };
            let p = Prediction::new(agent(t), t);
            return Ok(result(
                MethodKind::StepByStep,
                record_id,
                asker,
                Status::Completed,
                Some(p),
                trace,
            ));
        }
    }
    let last = trajectory.len().checked_sub(1);
    let fallback = last.map(|t| Prediction::new(agent(t), t));
    let trace = BaselineTrace::StepByStep {
        steps,
        unparsed_steps: unparsed,
    };
    Ok(result(
        MethodKind::StepByStep,
        record_id,
        asker,
        Status::NoFaultFound,
        fallback,
        trace,
    ))
}

pub fn binary_search_attribute(
    record_id: &str,
    trajectory: &Trajectory,
    client: &LlmClient,
) -> Result<AttributionResult, MethodError> {
    let mut asker = Asker::new(client, record_id);
    let mut queries = Vec::new();
    if trajectory.is_empty() {
        return Err(crate::prompting::PromptError::EmptyTrajectory.into());
    }
    let (mut lo, mut hi) = (0, trajectory.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        let prompt = render_baseline(&BaselinePrompt::BinarySearch {
            trajectory,
            lo,
            mid,
            hi,
        })?;
        let tag = format!("bs/query={}", queries.len() + 1);
        let half = |text: &str| {
            let mut o = parse_structured::<ParsedVerdict>(text);
            if let Some(v) = &o.value {
                if !matches!(v.judgement, Judgement::UpperHalf | Judgement::LowerHalf) {
                    o.error = Some(ParseError::SchemaMismatch(format!(
                        "judgement {:?} is not a half",
                        v.judgement
                    )));
                    o.value = None;
                }
            }
            o
        };
        let status = match asker.ask_with(&tag, vec![Message::user(prompt)], half)?.0 {
            Asked::Parsed(v) => {
                queries.push(BinaryQuery {
                    lo,
                    mid,
                    hi,
                    judgement: v.judgement,
                });
                if v.judgement == Judgement::LowerHalf {
                    hi = mid;
                } else {
                    lo = mid + 1;
                }
                continue;
            }
            Asked::Failed(_) => Status::ParseFailure,
            Asked::Overflow => Status::ContextOverflow,
        };
        return Ok(result(
            MethodKind::BinarySearch,
            record_id,
            asker,
            status,
            None,
            BaselineTrace::BinarySearch { queries },
        ));
    }
    let p = Prediction::new(trajectory.agent_at(lo).unwrap_or_default(), lo);
    Ok(result(
        MethodKind::BinarySearch,
        record_id,
        asker,
        Status::Completed,
        Some(p),
        BaselineTrace::BinarySearch { queries },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToolCallerConfig {
    pub max_tool_calls: usize,
}

impl Default for ToolCallerConfig {
    fn default() -> Self {
        ToolCallerConfig { max_tool_calls: 3 }
    }
}

impl ToolCallerConfig {
    pub fn validate(&self) -> Result<(), MethodError> {
        if self.max_tool_calls == 0 {
            return Err(MethodError::Config("max_tool_calls must be at least 1".into()));
        }
        Ok(())
    }
}

enum PlannerMove {
    Call(ToolCall),
    Malformed(ParseError),
    Answer(ParsedAnswer),
}

fn parse_planner(text: &str) -> ParseOutcome<PlannerMove> {
    let tool = |m: PlannerMove| ParseOutcome {
        value: Some(m),
        repair_applied: RepairKind::None,
        raw: text.to_string(),
        notes: Vec::new(),
        error: None,
    };
    match parse_tool_call(text) {
        Ok(Some(call)) => tool(PlannerMove::Call(call)),
        Err(e) => tool(PlannerMove::Malformed(e)),
        Ok(None) => {
            let o = parse_structured::<ParsedAnswer>(text);
            ParseOutcome {
                value: o.value.map(PlannerMove::Answer),
                repair_applied: o.repair_applied,
                raw: o.raw,
                notes: o.notes,
                error: o.error,
            }
        }
    }
}

pub fn tool_caller_attribute(
    record_id: &str,
    trajectory: &Trajectory,
    client: &LlmClient,
    config: &ToolCallerConfig,
) -> Result<AttributionResult, MethodError> {
    config.validate()?;
    let planner_prompt = render_baseline(&BaselinePrompt::ToolCallerPlanner { trajectory })?;
    let mut messages = vec![
        Message::system(tool_caller_agent_list(trajectory.len())),
        Message::user(planner_prompt),
    ];
    let mut asker = Asker::new(client, record_id);
    let mut calls: Vec<ToolCallRecord> = Vec::new();
    let mut forced = false;
    let mut judge_calls = 0;
    let mut turn = 0;

    let finish = |asker: Asker, calls, forced, status, pred, reason| {
        result(
            MethodKind::ToolCaller,
            record_id,
            asker,
            status,
            pred,
            BaselineTrace::ToolCaller {
                calls,
                forced_answer: forced,
                reason,
            },
        )
    };

    loop {
        turn += 1;
        let (asked, raw) =
            asker.ask_with(&format!("tool/planner={turn}"), messages.clone(), parse_planner)?;
        let mv = match asked {
            Asked::Parsed(mv) => mv,
            Asked::Failed(_) => {
                return Ok(finish(asker, calls, forced, Status::ParseFailure, None, String::new()))
            }
            Asked::Overflow => {
                return Ok(finish(asker, calls, forced, Status::ContextOverflow, None, String::new()))
            }
        };
        let raw = raw.unwrap_or_default();
        let describe = |mv: &PlannerMove| match mv {
            PlannerMove::Call(c) => c.display(),
            _ => raw.trim().chars().take(80).collect(),
        };
        match mv {
            PlannerMove::Answer(a) => {
                let pred = answer_prediction(&a);
                let status = if pred.is_some() {
                    Status::Completed
                } else {
                    Status::NoFaultFound
                };
                return Ok(finish(asker, calls, forced, status, pred, a.reason));
            }
            _ if forced => {
                // Still calling after being told to answer.
                return Ok(finish(asker, calls, forced, Status::ParseFailure, None, String::new()));
            }
            other if judge_calls >= config.max_tool_calls => {
                calls.push(ToolCallRecord {
                    call: describe(&other),
                    step: None,
                    judgement: None,
                    error: None,
                    refused: true,
                });
                messages.push(Message::assistant(raw.clone()));
                messages.push(Message::user(forced_answer_message(config.max_tool_calls)));
                forced = true;
            }
            PlannerMove::Malformed(e) => {
                judge_calls += 1;
                calls.push(ToolCallRecord {
                    call: describe(&PlannerMove::Malformed(e.clone())),
                    step: None,
                    judgement: None,
                    error: Some(e.to_string()),
                    refused: false,
                });
                messages.push(Message::assistant(raw.clone()));
                messages.push(Message::user(tool_error_message(&e.to_string())));
            }
            PlannerMove::Call(call) => {
                judge_calls += 1;
                let step = call
                    .id()
                    .and_then(|i| usize::try_from(i).ok())
                    .filter(|&i| i < trajectory.len());
                let problem = if call.name != "judge" {
                    Some(format!("unknown agent {:?}; the only agent is judge", call.name))
                } else if step.is_none() {
                    Some(format!(
                        "judge needs an integer id between 0 and {}",
                        trajectory.len() - 1
                    ))
                } else {
                    None
                };
                messages.push(Message::assistant(raw.clone()));
                if let Some(problem) = problem {
                    calls.push(ToolCallRecord {
                        call: call.display(),
                        step: None,
                        judgement: None,
                        error: Some(problem.clone()),
                        refused: false,
                    });
                    messages.push(Message::user(tool_error_message(&problem)));
                    continue;
                }
                let step = step.expect("checked above");
                let prompt = render_baseline(&BaselinePrompt::ToolCallerJudge { trajectory, step })?;
                let tag = format!("tool/judge={judge_calls}");
                let (verdict, message, error) =
                    match asker.ask::<ParsedVerdict>(&tag, vec![Message::user(prompt)])? {
                        Asked::Parsed(v) => {
                            let word = match v.judgement {
                                Judgement::Yes => "yes",
                                Judgement::No => "no",
                                Judgement::UpperHalf => "upper half",
                                Judgement::LowerHalf => "lower half",
                            };
                            let message = tool_result_message(&call.display(), word, &v.reason);
                            (Some(v.judgement), message, None)
                        }
                        Asked::Failed(e) => (
                            None,
                            tool_error_message("the judge reply could not be parsed"),
                            Some(e.to_string()),
                        ),
                        Asked::Overflow => {
                            return Ok(finish(
                                asker,
                                calls,
                                forced,
                                Status::ContextOverflow,
                                None,
                                String::new(),
                            ))
                        }
                    };
                calls.push(ToolCallRecord {
                    call: call.display(),
                    step: Some(step),
                    judgement: verdict,
                    error,
                    refused: false,
                });
                messages.push(Message::user(message));
            }
        }
    }
}
