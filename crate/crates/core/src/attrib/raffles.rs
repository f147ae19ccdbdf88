use serde::{Deserialize, Serialize};

use super::{AttributionResult, Asked, Asker, MethodError, MethodKind, Prediction, Status};
use crate::backend::{LlmClient, Message};
use crate::prompting::{criterion_key, render_evaluator, render_judge, ParsedEvaluation, ParsedJudgment};
use crate::trace::{agents_match, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RafflesConfig {
    /// K
    pub max_iterations: usize,
    /// Stop as soon as an iteration's total confidence exceeds this.
    pub confidence_threshold: u32,
    pub evaluator4_pass_score: u8,
    pub evaluator4_fail_score: u8,
}

impl Default for RafflesConfig {
    fn default() -> Self {
        RafflesConfig {
            max_iterations: 2,
            confidence_threshold: 350,
            evaluator4_pass_score: 100,
            evaluator4_fail_score: 0,
        }
    }
}

impl RafflesConfig {
    pub fn validate(&self) -> Result<(), MethodError> {
        let bad = |m: &str| Err(MethodError::Config(m.to_string()));
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1");
        }
        if self.confidence_threshold == 0 || self.confidence_threshold > 400 {
            return bad("confidence_threshold must be in 1..=400");
        }
        if self.evaluator4_pass_score > 100 || self.evaluator4_fail_score > 100 {
            return bad("evaluator 4 scores must be in 0..=100");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub agent_name: String,
    pub step_number: usize,
    /// Judge rationales for criteria 1..=3.
    pub rationales: [String; 3],
}

impl From<&ParsedJudgment> for Candidate {
    fn from(j: &ParsedJudgment) -> Self {
        Candidate {
            agent_name: j.agent_name.clone(),
            step_number: j.step_number,
            rationales: [
                j.mistake_reason.clone(),
                j.first_mistake.clone(),
                j.mistake_not_corrected.clone(),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    /// 1-based.
    pub iteration: usize,
    pub candidate: Candidate,
    pub evaluator_reasons: [String; 4],
    pub confidences: [u8; 4],
    pub total: u32,
}

/// Log-consistency check: the step exists and was taken by the named agent.
pub fn evaluator4_rule(trajectory: &Trajectory, candidate: &Candidate, config: &RafflesConfig) -> (u8, String) {
    let t = candidate.step_number;
    match trajectory.agent_at(t) {
        None => (
            config.evaluator4_fail_score,
            format!("step {t} does not exist; the log has {} steps", trajectory.len()),
        ),
        Some(actual) if agents_match(actual, &candidate.agent_name) => (
            config.evaluator4_pass_score,
            format!("step {t} was taken by {actual}, consistent with the candidate"),
        ),
        Some(actual) => (
            config.evaluator4_fail_score,
            format!(
                "step {t} was taken by {actual}, not by {}",
                candidate.agent_name
            ),
        ),
    }
}

const EVALUATOR_LABELS: [&str; 4] = [
    "Evaluator 1 (mistake_reason)",
    "Evaluator 2 (first_mistake)",
    "Evaluator 3 (mistake_not_corrected)",
    "Evaluator 4 (log consistency)",
];

/// Compact feedback block for the Judge, oldest iteration first.
pub fn history_digest(history: &[HistoryEntry]) -> String {
    let mut out = String::new();
    for entry in history {
        out.push_str(&format!(
            "Iteration {}: agent_name={}, step_number={}\n",
            entry.iteration, entry.candidate.agent_name, entry.candidate.step_number
        ));
        for p in 0..4 {
            out.push_str(&format!(
                "- {}, confidence {}: {}\n",
                EVALUATOR_LABELS[p], entry.confidences[p], entry.evaluator_reasons[p]
            ));
        }
        out.push_str(&format!("Total confidence: {} / 400\n", entry.total));
    }
    out.trim_end().to_string()
}

/// Highest total, earliest iteration on ties.
fn best(history: &[HistoryEntry]) -> Option<&HistoryEntry> {
    history
        .iter()
        .reduce(|best, e| if e.total > best.total { e } else { best })
}

fn prediction(entry: &HistoryEntry) -> Prediction {
    Prediction::new(&entry.candidate.agent_name, entry.candidate.step_number)
}

pub fn raffles_attribute(
    record_id: &str,
    trajectory: &Trajectory,
    client: &LlmClient,
    config: &RafflesConfig,
) -> Result<AttributionResult, MethodError> {
    config.validate()?;
    let mut asker = Asker::new(client, record_id);
    let mut history: Vec<HistoryEntry> = Vec::new();

    let finish = |asker: Asker, history: Vec<HistoryEntry>, status: Status, final_prediction| {
        AttributionResult {
            method: MethodKind::Raffles,
            record_id: record_id.to_string(),
            final_prediction,
            status,
            llm_calls: asker.calls,
            history,
            trace: None,
            parses: asker.parses,
        }
    };
    // A stage that cannot finish still reports the best candidate so far.
    let abort = |asker: Asker, history: Vec<HistoryEntry>, status: Status| {
        let fallback = best(&history).map(prediction);
        finish(asker, history, status, fallback)
    };

    for k in 1..=config.max_iterations {
        if let Some(last) = history.last() {
            if last.total > config.confidence_threshold {
                break;
            }
        }
        let digest = (!history.is_empty()).then(|| history_digest(&history));
        let prompt = render_judge(trajectory, digest.as_deref())?;
        let judgment: ParsedJudgment =
            match asker.ask(&format!("judge/iter={k}"), vec![Message::user(prompt)])? {
                Asked::Parsed(j) => j,
                Asked::Failed(_) => return Ok(abort(asker, history, Status::ParseFailure)),
                Asked::Overflow => return Ok(abort(asker, history, Status::ContextOverflow)),
            };

        let mut reasons: [String; 4] = Default::default();
        let mut confidences = [0u8; 4];
        for p in 1..=3u8 {
            let prompt = render_evaluator(p, trajectory, &judgment)?;
            let tag = format!("eval{p}/iter={k}");
            let i = p as usize - 1;
            match asker.ask::<ParsedEvaluation>(&tag, vec![Message::user(prompt)])? {
                Asked::Parsed(e) => {
                    reasons[i] = e.reason;
                    confidences[i] = e.confidence;
                }
                Asked::Failed(err) => {
                    reasons[i] = format!(
                        "no usable evaluation of {} ({err}); scored 0",
                        criterion_key(p)
                    );
                }
                Asked::Overflow => return Ok(abort(asker, history, Status::ContextOverflow)),
            }
        }
        let candidate = Candidate::from(&judgment);
        let (score4, reason4) = evaluator4_rule(trajectory, &candidate, config);
        confidences[3] = score4;
        reasons[3] = reason4;

        history.push(HistoryEntry {
            iteration: k,
            total: confidences.iter().map(|&c| c as u32).sum(),
            candidate,
            evaluator_reasons: reasons,
            confidences,
        });
    }

    let last = history.last().expect("at least one iteration ran");
    if last.total > config.confidence_threshold {
        let p = prediction(last);
        return Ok(finish(asker, history, Status::Converged, Some(p)));
    }
    let p = best(&history).map(prediction);
    Ok(finish(asker, history, Status::MaxIterations, p))
}
