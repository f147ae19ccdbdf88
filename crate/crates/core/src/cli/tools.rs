use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{io_err, CliError};
use crate::faultlab::{export_as_trajectory, generate_faulty_scenario, scenario_to_toml, GeneratorParams};
use crate::metrics::{trivial_agent_baseline, TrivialBaseline};
use crate::prompting::{render_baseline, render_judge, BaselinePrompt};
use crate::trace::{
    compute_stats, load_dataset_dir, serialize_record, validate_label, CharHeuristic,
    ConsistencyReport, DatasetRecord, DatasetStats, LoadedDataset,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub stats: DatasetStats,
    pub trivial_baseline: TrivialBaseline,
    pub malformed: usize,
}

pub fn stats(dir: &Path) -> Result<StatsSummary, CliError> {
    let LoadedDataset { records, errors } = load_dataset_dir(dir)?;
    let stats = compute_stats(&records, &CharHeuristic)?;
    let trivial_baseline =
        trivial_agent_baseline(records.iter().map(|r| r.label.mistake_agent.as_str()))?;
    Ok(StatsSummary {
        stats,
        trivial_baseline,
        malformed: errors.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub n_records: usize,
    pub malformed: Vec<String>,
    pub inconsistent: Vec<ConsistencyReport>,
}

impl ValidationSummary {
    pub fn is_clean(&self) -> bool {
        self.malformed.is_empty() && self.inconsistent.is_empty()
    }
}

pub fn validate_dataset(dir: &Path) -> Result<ValidationSummary, CliError> {
    let LoadedDataset { records, errors } = load_dataset_dir(dir)?;
    Ok(ValidationSummary {
        n_records: records.len(),
        malformed: errors.iter().map(|e| e.to_string()).collect(),
        inconsistent: records
            .iter()
            .map(validate_label)
            .filter(|r| !r.is_consistent)
            .collect(),
    })
}

/// Writes `n` labeled synthetic records as `1.json ..= n.json`. Per-record
/// seeds come from one ChaCha stream, so a seed fixes the whole set. With
/// `scenarios`, the source scenarios go to `scenarios/<id>.toml`.
pub fn faultlab_gen(
    seed: u64,
    n: usize,
    out: &Path,
    params: &GeneratorParams,
    scenarios: bool,
) -> Result<Vec<DatasetRecord>, CliError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let scen_dir = out.join("scenarios");
    if scenarios {
        fs::create_dir_all(&scen_dir).map_err(io_err(&scen_dir))?;
    }
    let mut stream = ChaCha8Rng::seed_from_u64(seed);
    let mut written = Vec::with_capacity(n);
    for i in 1..=n {
        let id = i.to_string();
        let (scenario, run, _) =
            generate_faulty_scenario(stream.next_u64(), params, &format!("scenario-{id}"));
        let record = export_as_trajectory(&scenario, &run, &id)
            .map_err(|e| CliError::ConfigInvalid(e.to_string()))?;
        let path = out.join(format!("{id}.json"));
        fs::write(&path, serialize_record(&record)).map_err(io_err(&path))?;
        if scenarios {
            let p = scen_dir.join(format!("{id}.toml"));
            fs::write(&p, scenario_to_toml(&scenario)).map_err(io_err(&p))?;
        }
        written.push(record);
    }
    Ok(written)
}

/// Renders every prompt that does not depend on a model reply.
pub fn dump_prompts(record: &DatasetRecord, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let dir = out.join(&record.record_id);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let t = &record.trajectory;
    let prompt_err = |e: crate::prompting::PromptError| CliError::ConfigInvalid(e.to_string());
    let mut files = vec![
        ("raffles_judge_iter1".to_string(), render_judge(t, None).map_err(prompt_err)?),
        (
            "chat_llm".to_string(),
            render_baseline(&BaselinePrompt::ChatLlm { trajectory: t }).map_err(prompt_err)?,
        ),
        (
            "tool_caller_planner".to_string(),
            render_baseline(&BaselinePrompt::ToolCallerPlanner { trajectory: t })
                .map_err(prompt_err)?,
        ),
    ];
    if !t.is_empty() {
        let hi = t.len() - 1;
        files.push((
            "binary_search_query1".to_string(),
            render_baseline(&BaselinePrompt::BinarySearch {
                trajectory: t,
                lo: 0,
                mid: hi / 2,
                hi,
            })
            .map_err(prompt_err)?,
        ));
    }
    for step in 0..t.len() {
        files.push((
            format!("step_by_step_step{step}"),
            render_baseline(&BaselinePrompt::StepByStep { trajectory: t, step }).map_err(prompt_err)?,
        ));
    }
    let mut paths = Vec::new();
    for (name, body) in files {
        let p = dir.join(format!("{name}.txt"));
        fs::write(&p, body).map_err(io_err(&p))?;
        paths.push(p);
    }
    Ok(paths)
}
