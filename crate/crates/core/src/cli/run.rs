use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::report::read_results_lenient;
use super::{io_err, BackendSource, CliError, RunConfig};
use crate::attrib::{attribute, AttributionResult};
use crate::backend::{
    read_transcript, ChatBackend, LlmClient, OpenAiBackend, ReplayBackend, ScriptedBackend,
    Transcript, TranscriptRecorder,
};
use crate::prompting::template_versions;
use crate::trace::{load_dataset_dir, resolve_subset, DatasetRecord};

pub const RESULTS_FILE: &str = "results.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub resume: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub record_id: String,
    /// Status name, `pending` if not yet attempted or `failed` on a hard error.
    pub status: String,
    #[serde(default)]
    pub llm_calls: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LlmTotals {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
    pub dataset_dir: String,
    pub complete: bool,
    pub records: Vec<ManifestRecord>,
    pub status_counts: BTreeMap<String, usize>,
    pub llm: LlmTotals,
    pub started_unix_ms: u64,
    pub finished_unix_ms: Option<u64>,
    pub elapsed_ms: u64,
    pub template_versions: BTreeMap<String, String>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let tmp = path.with_extension("json.tmp");
    let body = serde_json::to_string_pretty(value).expect("serializes");
    fs::write(&tmp, body + "\n").map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn build_backend(cfg: &RunConfig) -> Result<Arc<dyn ChatBackend>, CliError> {
    Ok(match &cfg.source {
        BackendSource::Live => Arc::new(
            OpenAiBackend::new(&cfg.backend)
                .map_err(|e| CliError::BackendUnavailable(e.to_string()))?,
        ),
        BackendSource::Script(p) => Arc::new(
            ScriptedBackend::load(p).map_err(|e| CliError::BackendUnavailable(e.to_string()))?,
        ),
        BackendSource::Replay(p) => {
            let t = read_transcript(p).map_err(|e| CliError::BackendUnavailable(e.to_string()))?;
            Arc::new(ReplayBackend::from_transcript(&t))
        }
    })
}

/// Checks the out dir against an earlier run and returns results already done.
fn prepare_out_dir(
    cfg: &RunConfig,
    hash: &str,
    opts: RunOptions,
) -> Result<Vec<AttributionResult>, CliError> {
    let out = &cfg.out;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let manifest_path = out.join(MANIFEST_FILE);
    let results_path = out.join(RESULTS_FILE);
    if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let prev: RunManifest = serde_json::from_str(&text)
            .map_err(|e| CliError::ConfigInvalid(format!("unreadable manifest: {e}")))?;
        if prev.run_id != cfg.run_id {
            return Err(CliError::ConfigInvalid(format!(
                "{} already holds run {:?}",
                out.display(),
                prev.run_id
            )));
        }
        if !opts.resume {
            return Err(CliError::ConfigInvalid(format!(
                "run {:?} already exists in {}; pass --resume to continue it",
                cfg.run_id,
                out.display()
            )));
        }
        if prev.config_hash != hash {
            return Err(CliError::ConfigInvalid(format!(
                "config hash {hash} differs from the resumed run's {}",
                prev.config_hash
            )));
        }
    } else if results_path.exists() && !opts.resume {
        return Err(CliError::ConfigInvalid(format!(
            "{} exists without a manifest",
            results_path.display()
        )));
    }
    if opts.resume && results_path.exists() {
        read_results_lenient(&results_path, true)
    } else {
        Ok(Vec::new())
    }
}

/// Runs one method over a dataset directory, appending to `results.jsonl` as
/// records finish.
pub fn run(cfg: &RunConfig, opts: RunOptions) -> Result<RunManifest, CliError> {
    cfg.validate()?;
    let started = Instant::now();
    let started_unix_ms = now_ms();
    let hash = cfg.hash();
    let dataset_dir = resolve_subset(&cfg.dataset, cfg.subset.as_deref());
    let loaded = load_dataset_dir(&dataset_dir)?;
    if let Some(e) = loaded.errors.first() {
        return Err(CliError::ConfigInvalid(format!(
            "{} malformed record(s) in {}; first: {e}",
            loaded.errors.len(),
            dataset_dir.display()
        )));
    }
    if loaded.records.is_empty() {
        return Err(CliError::ConfigInvalid(format!(
            "no records in {}",
            dataset_dir.display()
        )));
    }
    let records = loaded.records;

    let prior = prepare_out_dir(cfg, &hash, opts)?;
    let mut done: BTreeMap<String, AttributionResult> = BTreeMap::new();
    for r in prior {
        if !records.iter().any(|d| d.record_id == r.record_id) {
            return Err(CliError::ConfigInvalid(format!(
                "resumed result for unknown record {}",
                r.record_id
            )));
        }
        done.entry(r.record_id.clone()).or_insert(r);
    }

    let backend = build_backend(cfg)?;
    let transcript_path = cfg.out.join(TRANSCRIPT_FILE);
    let recorder = Arc::new(
        TranscriptRecorder::to_file(cfg.run_id.clone(), &transcript_path)
            .map_err(io_err(&transcript_path))?,
    );
    let client = LlmClient::new(backend, cfg.backend.clone()).with_recorder(recorder.clone());

    let mut manifest = RunManifest {
        run_id: cfg.run_id.clone(),
        config_hash: hash,
        seed: cfg.seed,
        config: cfg.clone(),
        dataset_dir: dataset_dir.display().to_string(),
        complete: false,
        records: Vec::new(),
        status_counts: BTreeMap::new(),
        llm: LlmTotals::default(),
        started_unix_ms,
        finished_unix_ms: None,
        elapsed_ms: 0,
        template_versions: template_versions(),
    };
    fill_manifest(&mut manifest, &records, &done, &BTreeMap::new());
    let manifest_path = cfg.out.join(MANIFEST_FILE);
    write_json_atomic(&manifest_path, &manifest)?;

    let mut pending: Vec<&DatasetRecord> = records
        .iter()
        .filter(|r| !done.contains_key(&r.record_id))
        .collect();
    pending.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    log::info!(
        "{}: {} records, {} already done, {} to run with {} worker(s)",
        cfg.run_id,
        records.len(),
        done.len(),
        pending.len(),
        cfg.workers
    );

    let results_path = cfg.out.join(RESULTS_FILE);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&results_path)
        .map_err(io_err(&results_path))?;
    let mut writer = BufWriter::new(file);
    let mut failures: BTreeMap<String, String> = BTreeMap::new();
    let next = AtomicUsize::new(0);
    let total = pending.len();
    let mut write_error = None;

    std::thread::scope(|s| {
        let (tx, rx) = mpsc::channel::<(String, Result<AttributionResult, String>)>();
        for _ in 0..cfg.workers.min(total.max(1)) {
            let tx = tx.clone();
            let (pending, next, client) = (&pending, &next, &client);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(rec) = pending.get(i) else { break };
                let res = attribute(
                    cfg.method,
                    &cfg.methods,
                    &rec.record_id,
                    &rec.trajectory,
                    client,
                )
                .map_err(|e| e.to_string());
                if tx.send((rec.record_id.clone(), res)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (n, (id, res)) in rx.into_iter().enumerate() {
            match res {
                Ok(r) => {
                    let line = serde_json::to_string(&r).expect("result serializes");
                    let w = writeln!(writer, "{line}").and_then(|_| writer.flush());
                    if let Err(e) = w {
                        write_error.get_or_insert(e);
                    }
                    log::info!("[{}/{total}] {id}: {}", n + 1, r.status.as_str());
                    done.insert(id, r);
                }
                Err(e) => {
                    log::warn!("[{}/{total}] {id}: failed: {e}", n + 1);
                    failures.insert(id, e);
                }
            }
        }
    });
    drop(writer);
    if let Some(e) = write_error {
        return Err(io_err(&results_path)(e));
    }

    if failures.is_empty() {
        let tmp = cfg.out.join("results.jsonl.tmp");
        let mut f = BufWriter::new(File::create(&tmp).map_err(io_err(&tmp))?);
        for rec in &records {
            let line = serde_json::to_string(&done[&rec.record_id]).expect("result serializes");
            writeln!(f, "{line}").map_err(io_err(&tmp))?;
        }
        f.flush().map_err(io_err(&tmp))?;
        drop(f);
        fs::rename(&tmp, &results_path).map_err(io_err(&results_path))?;
    }

    if cfg.dump_prompts {
        dump_transcript_prompts(&recorder.snapshot(), &cfg.out.join("prompts"))?;
    }

    fill_manifest(&mut manifest, &records, &done, &failures);
    manifest.llm = llm_totals(&transcript_path, &cfg.run_id, &done);
    manifest.complete = failures.is_empty();
    manifest.finished_unix_ms = Some(now_ms());
    manifest.elapsed_ms = started.elapsed().as_millis() as u64;
    write_json_atomic(&manifest_path, &manifest)?;
    Ok(manifest)
}

fn fill_manifest(
    m: &mut RunManifest,
    records: &[DatasetRecord],
    done: &BTreeMap<String, AttributionResult>,
    failures: &BTreeMap<String, String>,
) {
    m.records = records
        .iter()
        .map(|rec| {
            let id = rec.record_id.clone();
            match (done.get(&id), failures.get(&id)) {
                (Some(r), _) => ManifestRecord {
                    record_id: id,
                    status: r.status.as_str().to_string(),
                    llm_calls: r.llm_calls,
                    error: None,
                },
                (None, Some(e)) => ManifestRecord {
                    record_id: id,
                    status: "failed".into(),
                    llm_calls: 0,
                    error: Some(e.clone()),
                },
                (None, None) => ManifestRecord {
                    record_id: id,
                    status: "pending".into(),
                    llm_calls: 0,
                    error: None,
                },
            }
        })
        .collect();
    m.status_counts.clear();
    for r in &m.records {
        *m.status_counts.entry(r.status.clone()).or_default() += 1;
    }
}

fn llm_totals(
    transcript: &Path,
    run_id: &str,
    done: &BTreeMap<String, AttributionResult>,
) -> LlmTotals {
    let mut t = LlmTotals {
        calls: done.values().map(|r| r.llm_calls as u64).sum(),
        ..Default::default()
    };
    if let Ok(tr) = read_transcript(transcript) {
        for e in tr.entries.iter().filter(|e| e.run_id == run_id) {
            t.prompt_tokens += e.response.prompt_tokens;
            t.completion_tokens += e.response.completion_tokens;
        }
    }
    t
}

/// One file per request, `prompts/<record>/<seq>_<tag>.txt`.
fn dump_transcript_prompts(transcript: &Transcript, dir: &Path) -> Result<(), CliError> {
    for e in &transcript.entries {
        let rec_dir = dir.join(&e.record_id);
        fs::create_dir_all(&rec_dir).map_err(io_err(&rec_dir))?;
        let name = format!("{:05}_{}.txt", e.seq, e.tag.replace(['/', '='], "_"));
        let mut body = String::new();
        for m in &e.request.messages {
            body.push_str(&format!("### {:?}\n{}\n\n", m.role, m.content));
        }
        body.push_str(&format!("### Response\n{}\n", e.response.text));
        let path = rec_dir.join(name);
        fs::write(&path, body).map_err(io_err(&path))?;
    }
    Ok(())
}
