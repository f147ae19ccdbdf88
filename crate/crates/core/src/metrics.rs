//! Scoring attribution results against labels.
//!
//! Every accuracy uses all attempted records as its denominator; a missing
//! prediction is simply wrong.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attrib::{AttributionResult, HistoryEntry, Prediction, Status};
use crate::trace::{agents_match, normalize_agent, DatasetRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no outcomes to score")]
    EmptyOutcomes,
    #[error("no RAFFLES histories to analyze")]
    NoMultiIterationRuns,
    #[error("record {0} has no length quartile")]
    MissingQuartile(String),
    #[error("result for unknown record {0}")]
    JoinFailure(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredOutcome {
    pub record_id: String,
    pub predicted: Option<Prediction>,
    pub truth: Prediction,
    pub status: Status,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    /// Count a step prediction only when the agent matches as well.
    pub require_agent_for_step: bool,
}

/// Joins results with their labels, in result order.
pub fn join_outcomes(
    results: &[AttributionResult],
    records: &[DatasetRecord],
) -> Result<Vec<ScoredOutcome>, MetricsError> {
    let labels: BTreeMap<&str, &DatasetRecord> =
        records.iter().map(|r| (r.record_id.as_str(), r)).collect();
    results
        .iter()
        .map(|res| {
            let rec = labels
                .get(res.record_id.as_str())
                .ok_or_else(|| MetricsError::JoinFailure(res.record_id.clone()))?;
            Ok(ScoredOutcome {
                record_id: res.record_id.clone(),
                predicted: res.final_prediction.clone(),
                truth: Prediction::new(&rec.label.mistake_agent, rec.label.mistake_step),
                status: res.status,
            })
        })
        .collect()
}

fn fraction(
    outcomes: &[ScoredOutcome],
    hit: impl Fn(&Prediction, &Prediction) -> bool,
) -> Result<(usize, f64), MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::EmptyOutcomes);
    }
    let correct = outcomes
        .iter()
        .filter(|o| o.predicted.as_ref().is_some_and(|p| hit(p, &o.truth)))
        .count();
    Ok((correct, correct as f64 / outcomes.len() as f64))
}

fn within(p: &Prediction, t: &Prediction, k: usize, cfg: MetricsConfig) -> bool {
    p.step_number.abs_diff(t.step_number) <= k
        && (!cfg.require_agent_for_step || agents_match(&p.agent_name, &t.agent_name))
}

pub fn strict_step_accuracy(outcomes: &[ScoredOutcome], cfg: MetricsConfig) -> Result<f64, MetricsError> {
    tolerant_step_accuracy(outcomes, 0, cfg)
}

/// Fraction with `|predicted - truth| <= k`.
pub fn tolerant_step_accuracy(
    outcomes: &[ScoredOutcome],
    k: usize,
    cfg: MetricsConfig,
) -> Result<f64, MetricsError> {
    Ok(fraction(outcomes, |p, t| within(p, t, k, cfg))?.1)
}

pub fn agent_level_accuracy(outcomes: &[ScoredOutcome]) -> Result<f64, MetricsError> {
    Ok(fraction(outcomes, |p, t| agents_match(&p.agent_name, &t.agent_name))?.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub n: usize,
    pub strict_step: f64,
    /// Keyed by tolerance k; entry 0 equals `strict_step`.
    pub tolerant_step: BTreeMap<usize, f64>,
    pub agent_level: f64,
    pub strict_correct: usize,
    pub tolerant_correct: BTreeMap<usize, usize>,
    pub agent_correct: usize,
}

pub fn accuracy_report(
    outcomes: &[ScoredOutcome],
    max_k: usize,
    cfg: MetricsConfig,
) -> Result<AccuracyReport, MetricsError> {
    let mut tolerant_step = BTreeMap::new();
    let mut tolerant_correct = BTreeMap::new();
    for k in 0..=max_k {
        let (c, f) = fraction(outcomes, |p, t| within(p, t, k, cfg))?;
        tolerant_step.insert(k, f);
        tolerant_correct.insert(k, c);
    }
    let (agent_correct, agent_level) =
        fraction(outcomes, |p, t| agents_match(&p.agent_name, &t.agent_name))?;
    Ok(AccuracyReport {
        n: outcomes.len(),
        strict_step: tolerant_step[&0],
        strict_correct: tolerant_correct[&0],
        tolerant_step,
        tolerant_correct,
        agent_level,
        agent_correct,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrivialBaseline {
    pub agent: String,
    pub correct: usize,
    pub n: usize,
    pub accuracy: f64,
}

/// Always predicting the most common labeled agent. Names are grouped after
/// normalization; ties go to the lexicographically smallest normalized name.
/// The reported spelling is the first one seen.
pub fn trivial_agent_baseline<'a>(
    agents: impl IntoIterator<Item = &'a str>,
) -> Result<TrivialBaseline, MetricsError> {
    let mut groups: BTreeMap<String, (usize, &str)> = BTreeMap::new();
    let mut n = 0;
    for a in agents {
        n += 1;
        groups.entry(normalize_agent(a)).or_insert((0, a)).0 += 1;
    }
    let (_, (correct, agent)) = groups
        .iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then_with(|| b.0.cmp(a.0)))
        .ok_or(MetricsError::EmptyOutcomes)?;
    Ok(TrivialBaseline {
        agent: agent.to_string(),
        correct: *correct,
        n,
        accuracy: *correct as f64 / n as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeRate {
    pub changed: usize,
    pub n: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// Keyed by the earlier iteration k of the transition k -> k+1.
    pub changed_pair_rate: BTreeMap<usize, ChangeRate>,
    /// Iteration -> proposed step -> count, over records that reached that
    /// iteration (already-converged records drop out).
    pub per_iteration_histogram: BTreeMap<usize, BTreeMap<usize, usize>>,
}

pub fn changed_pair_rate(histories: &[&[HistoryEntry]]) -> Result<ConvergenceReport, MetricsError> {
    if histories.iter().all(|h| h.is_empty()) {
        return Err(MetricsError::NoMultiIterationRuns);
    }
    let mut rates: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut hist: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for h in histories {
        for e in h.iter() {
            *hist
                .entry(e.iteration)
                .or_default()
                .entry(e.candidate.step_number)
                .or_default() += 1;
        }
        for pair in h.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let slot = rates.entry(a.iteration).or_default();
            slot.1 += 1;
            let same = a.candidate.step_number == b.candidate.step_number
                && agents_match(&a.candidate.agent_name, &b.candidate.agent_name);
            if !same {
                slot.0 += 1;
            }
        }
    }
    Ok(ConvergenceReport {
        changed_pair_rate: rates
            .into_iter()
            .map(|(k, (changed, n))| {
                (
                    k,
                    ChangeRate {
                        changed,
                        n,
                        rate: changed as f64 / n as f64,
                    },
                )
            })
            .collect(),
        per_iteration_histogram: hist,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuartileReport {
    pub n: usize,
    /// `None` for an empty quartile.
    pub accuracy: Option<AccuracyReport>,
}

pub fn quartile_breakdown(
    outcomes: &[ScoredOutcome],
    quartiles: &BTreeMap<String, u8>,
    max_k: usize,
    cfg: MetricsConfig,
) -> Result<BTreeMap<u8, QuartileReport>, MetricsError> {
    let mut buckets: BTreeMap<u8, Vec<ScoredOutcome>> = (1..=4).map(|q| (q, Vec::new())).collect();
    for o in outcomes {
        let q = quartiles
            .get(&o.record_id)
            .ok_or_else(|| MetricsError::MissingQuartile(o.record_id.clone()))?;
        buckets.entry(*q).or_default().push(o.clone());
    }
    buckets
        .into_iter()
        .map(|(q, bucket)| {
            let accuracy = if bucket.is_empty() {
                None
            } else {
                Some(accuracy_report(&bucket, max_k, cfg)?)
            };
            Ok((
                q,
                QuartileReport {
                    n: bucket.len(),
                    accuracy,
                },
            ))
        })
        .collect()
}

/// Count per status, zero-filled.
pub fn status_counts(outcomes: &[ScoredOutcome]) -> BTreeMap<Status, usize> {
    let mut counts: BTreeMap<Status, usize> = Status::ALL.iter().map(|s| (*s, 0)).collect();
    for o in outcomes {
        *counts.entry(o.status).or_default() += 1;
    }
    counts
}

/// Percentage with two decimals, as printed in report tables.
pub fn pct(f: f64) -> String {
    format!("{:.2}", 100.0 * f)
}
