use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, CliError};
use crate::attrib::{AttributionResult, HistoryEntry, MethodKind, Prediction, Status};
use crate::metrics::{
    accuracy_report, changed_pair_rate, join_outcomes, pct, quartile_breakdown, status_counts,
    trivial_agent_baseline, AccuracyReport, ConvergenceReport, MetricsConfig, QuartileReport,
    ScoredOutcome, TrivialBaseline,
};
use crate::trace::{assign_length_quartiles, validate_label, CharHeuristic, ConsistencyReport, DatasetRecord};

/// Reads `results.jsonl`. A malformed final line (an interrupted write) is
/// dropped; with `truncate` it is also cut from the file.
pub(crate) fn read_results_lenient(
    path: &Path,
    truncate: bool,
) -> Result<Vec<AttributionResult>, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    let mut good_len = 0usize;
    let mut offset = 0usize;
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    for (i, line) in lines.iter().enumerate() {
        offset += line.len();
        if line.trim().is_empty() {
            good_len = offset;
            continue;
        }
        match serde_json::from_str::<AttributionResult>(line) {
            Ok(r) if line.ends_with('\n') => {
                out.push(r);
                good_len = offset;
            }
            Ok(_) | Err(_) if i + 1 == lines.len() => {
                log::warn!("{}: dropping truncated final line", path.display());
                break;
            }
            Err(e) => {
                return Err(CliError::ConfigInvalid(format!(
                    "{} line {}: {e}",
                    path.display(),
                    i + 1
                )))
            }
            Ok(_) => unreachable!("only the last line can lack a newline"),
        }
    }
    if truncate && good_len < text.len() {
        let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
        f.set_len(good_len as u64).map_err(io_err(path))?;
    }
    Ok(out)
}

/// Reads results from a `results.jsonl` file or a run directory.
pub fn read_results(path: &Path) -> Result<Vec<AttributionResult>, CliError> {
    let file = if path.is_dir() {
        path.join(super::run::RESULTS_FILE)
    } else {
        path.to_path_buf()
    };
    read_results_lenient(&file, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    /// Tolerances `0..=max_k` are reported.
    pub max_k: usize,
    pub metrics: MetricsConfig,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            max_k: 5,
            metrics: MetricsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub methods: Vec<MethodKind>,
    pub options: ReportOptions,
    pub accuracy: AccuracyReport,
    pub status_counts: BTreeMap<Status, usize>,
    pub trivial_baseline: TrivialBaseline,
    /// Absent when fewer than four records were scored.
    pub quartiles: Option<BTreeMap<u8, QuartileReport>>,
    /// Only for iterative runs with at least one multi-iteration record.
    pub convergence: Option<ConvergenceReport>,
    /// Accuracy had the run stopped after `i` iterations.
    pub accuracy_by_iteration: BTreeMap<usize, AccuracyReport>,
    /// Scored records whose label disagrees with their own log. They stay in
    /// every denominator.
    pub inconsistent_labels: Vec<ConsistencyReport>,
}

/// The prediction a run capped at `k` iterations would have returned.
///
/// Past history entries were all below the threshold when the loop went on,
/// so capping is argmax over the first `k` (earliest wins ties).
fn prediction_at(result: &AttributionResult, k: usize) -> Option<Prediction> {
    if result.history.len() <= k {
        return result.final_prediction.clone();
    }
    let mut best: Option<&HistoryEntry> = None;
    for h in &result.history[..k] {
        if best.is_none_or(|b| h.total > b.total) {
            best = Some(h);
        }
    }
    best.map(|h| Prediction::new(&h.candidate.agent_name, h.candidate.step_number))
}

pub fn build_report(
    results: &[AttributionResult],
    records: &[DatasetRecord],
    options: ReportOptions,
) -> Result<Report, CliError> {
    let outcomes = join_outcomes(results, records)?;
    let accuracy = accuracy_report(&outcomes, options.max_k, options.metrics)?;
    let trivial_baseline =
        trivial_agent_baseline(outcomes.iter().map(|o| o.truth.agent_name.as_str()))?;

    let scored: Vec<DatasetRecord> = records
        .iter()
        .filter(|r| results.iter().any(|x| x.record_id == r.record_id))
        .cloned()
        .collect();
    let quartiles = match assign_length_quartiles(&scored, &CharHeuristic) {
        Ok(q) => Some(quartile_breakdown(&outcomes, &q, options.max_k, options.metrics)?),
        Err(_) => None,
    };

    let histories: Vec<&[HistoryEntry]> = results
        .iter()
        .filter(|r| !r.history.is_empty())
        .map(|r| r.history.as_slice())
        .collect();
    let convergence = changed_pair_rate(&histories).ok();

    let max_iter = results.iter().map(|r| r.history.len()).max().unwrap_or(0);
    let mut accuracy_by_iteration = BTreeMap::new();
    for k in 1..=max_iter {
        let capped: Vec<ScoredOutcome> = outcomes
            .iter()
            .zip(results)
            .map(|(o, r)| ScoredOutcome {
                predicted: prediction_at(r, k),
                ..o.clone()
            })
            .collect();
        accuracy_by_iteration.insert(k, accuracy_report(&capped, options.max_k, options.metrics)?);
    }

    let inconsistent_labels = scored
        .iter()
        .map(validate_label)
        .filter(|c| !c.is_consistent)
        .collect();

    let mut methods: Vec<MethodKind> = results.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();
    Ok(Report {
        methods,
        options,
        status_counts: status_counts(&outcomes),
        accuracy,
        trivial_baseline,
        quartiles,
        convergence,
        accuracy_by_iteration,
        inconsistent_labels,
    })
}

/// `strict & ±1 & ... & ±k & agent` with two-decimal percentages.
pub fn table_row(acc: &AccuracyReport) -> String {
    let mut cells: Vec<String> = acc.tolerant_step.values().map(|f| pct(*f)).collect();
    cells.push(pct(acc.agent_level));
    cells.join(" & ")
}

pub fn render_text(r: &Report) -> String {
    let mut s = String::new();
    let methods: Vec<&str> = r.methods.iter().map(|m| m.as_str()).collect();
    let a = &r.accuracy;
    let _ = writeln!(s, "method(s): {}", methods.join(", "));
    let _ = writeln!(s, "records:   {}", a.n);
    if r.options.metrics.require_agent_for_step {
        let _ = writeln!(s, "step accuracy also requires the agent to match");
    }
    let _ = writeln!(s, "\nstatus");
    for (st, c) in &r.status_counts {
        let _ = writeln!(s, "  {:<17} {c}", st.as_str());
    }
    let _ = writeln!(s, "\naccuracy");
    for (k, f) in &a.tolerant_step {
        let label = if *k == 0 { "step (strict)".to_string() } else { format!("step ±{k}") };
        let _ = writeln!(s, "  {label:<17} {:>6}%  ({}/{})", pct(*f), a.tolerant_correct[k], a.n);
    }
    let _ = writeln!(s, "  {:<17} {:>6}%  ({}/{})", "agent", pct(a.agent_level), a.agent_correct, a.n);
    let t = &r.trivial_baseline;
    let _ = writeln!(
        s,
        "  {:<17} {:>6}%  ({}/{}, always {:?})",
        "trivial agent",
        pct(t.accuracy),
        t.correct,
        t.n,
        t.agent
    );
    let _ = writeln!(s, "\ntable row: {}", table_row(a));

    if let Some(q) = &r.quartiles {
        let _ = writeln!(s, "\nby log-length quartile (strict step / agent)");
        for (i, qr) in q {
            match &qr.accuracy {
                Some(acc) => {
                    let _ = writeln!(
                        s,
                        "  Q{i}  n={:<4} {:>6}%  {:>6}%",
                        qr.n,
                        pct(acc.strict_step),
                        pct(acc.agent_level)
                    );
                }
                None => {
                    let _ = writeln!(s, "  Q{i}  n=0");
                }
            }
        }
    }
    if !r.accuracy_by_iteration.is_empty() {
        let _ = writeln!(s, "\nif stopped after iteration i (strict step / agent)");
        for (i, acc) in &r.accuracy_by_iteration {
            let _ = writeln!(s, "  i={i:<3} {:>6}%  {:>6}%", pct(acc.strict_step), pct(acc.agent_level));
        }
    }
    if let Some(c) = &r.convergence {
        let _ = writeln!(s, "\ncandidate changed between iterations k-1 and k");
        for (k, cr) in &c.changed_pair_rate {
            let _ = writeln!(s, "  k={k:<3} {:>6}%  ({}/{})", pct(cr.rate), cr.changed, cr.n);
        }
    }
    if !r.inconsistent_labels.is_empty() {
        let _ = writeln!(s, "\nlabels inconsistent with their log (still scored)");
        for c in &r.inconsistent_labels {
            let _ = writeln!(s, "  {}: {}", c.record_id, c.reason);
        }
    }
    s
}

/// Writes `report.txt`, `report.json` and the plot series CSVs.
pub fn write_report(r: &Report, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<(), CliError> {
        let p = dir.join(name);
        fs::write(&p, body).map_err(io_err(&p))?;
        written.push(p);
        Ok(())
    };
    put("report.txt", render_text(r))?;
    put(
        "report.json",
        serde_json::to_string_pretty(r).expect("report serializes") + "\n",
    )?;

    let mut csv = String::from("k,step_accuracy,correct,n\n");
    for (k, f) in &r.accuracy.tolerant_step {
        let _ = writeln!(csv, "{k},{f:.6},{},{}", r.accuracy.tolerant_correct[k], r.accuracy.n);
    }
    put("accuracy_vs_k.csv", csv)?;

    if !r.accuracy_by_iteration.is_empty() {
        let mut csv = String::from("iteration,step_accuracy,agent_accuracy,n\n");
        for (i, a) in &r.accuracy_by_iteration {
            let _ = writeln!(csv, "{i},{:.6},{:.6},{}", a.strict_step, a.agent_level, a.n);
        }
        put("accuracy_vs_iteration.csv", csv)?;
    }
    if let Some(c) = &r.convergence {
        let mut csv = String::from("iteration,step_number,count\n");
        for (i, hist) in &c.per_iteration_histogram {
            for (step, count) in hist {
                let _ = writeln!(csv, "{i},{step},{count}");
            }
        }
        put("histogram.csv", csv)?;
    }
    Ok(written)
}
