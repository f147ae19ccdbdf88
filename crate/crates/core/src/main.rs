use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use faultattr::attrib::MethodKind;
use faultattr::cli::{
    build_report, dump_prompts, faultlab_gen, read_results, render_text, run, stats,
    validate_dataset, write_report, BackendOverrides, CliError, ReportOptions, RunConfigFile,
    RunManifest, RunOptions,
};
use faultattr::faultlab::GeneratorParams;
use faultattr::metrics::{pct, MetricsConfig};
use faultattr::trace::{load_dataset_dir, resolve_subset};

#[derive(Parser)]
#[command(name = "faultattr", version, about = "Attribute decisive faults in failed multi-agent LLM runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DatasetArgs {
    /// Dataset root, or a directory of record files.
    #[arg(long)]
    dataset: PathBuf,
    /// Subset directory under the root, e.g. Hand-Crafted.
    #[arg(long)]
    subset: Option<String>,
}

impl DatasetArgs {
    fn dir(&self) -> PathBuf {
        resolve_subset(&self.dataset, self.subset.as_deref())
    }
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    subset: Option<String>,
    /// raffles, chat_llm, step_by_step, binary_search or tool_caller.
    #[arg(long)]
    method: Option<MethodKind>,
    #[arg(long)]
    backend_profile: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    threshold: Option<u32>,
    #[arg(long)]
    max_tool_calls: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue an interrupted run in the same out dir.
    #[arg(long)]
    resume: bool,
    /// Answer from a recorded transcript instead of an endpoint.
    #[arg(long, conflicts_with = "script")]
    replay: Option<PathBuf>,
    /// Answer from a JSON-lines script of {record_id, tag, text}.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long)]
    dump_prompts: bool,
    /// Tolerances reported after the run: 0..=N.
    #[arg(long, default_value_t = 5)]
    tolerance: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Run one attribution method over a dataset.
    Run(Box<RunArgs>),
    /// Score a finished run against the dataset labels.
    Report {
        /// Run directory or results.jsonl.
        #[arg(long)]
        results: PathBuf,
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long, default_value_t = 5)]
        tolerance: usize,
        /// Also require the agent to match for step accuracy.
        #[arg(long)]
        require_agent: bool,
        /// Where to write report files; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dataset size, average length and the majority-agent baseline.
    Stats {
        #[command(flatten)]
        data: DatasetArgs,
    },
    /// Lists malformed records and labels that disagree with their log.
    ValidateDataset {
        #[command(flatten)]
        data: DatasetArgs,
    },
    /// Writes seeded synthetic records with known decisive faults.
    FaultlabGen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 30)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the source scenarios as TOML.
        #[arg(long)]
        scenarios: bool,
    },
    /// Renders the prompts that do not depend on model replies.
    DumpPrompts {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long)]
        record: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-runs a finished run from its transcript and compares results.
    Replay {
        /// Directory of the original run.
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run_config(a: RunArgs) -> Result<RunConfigFile, CliError> {
    let mut f = match &a.config {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    };
    macro_rules! over {
        ($($field:ident <- $flag:expr),*) => { $(if let Some(v) = $flag { f.$field = Some(v); })* };
    }
    over!(dataset <- a.dataset, subset <- a.subset, method <- a.method,
          backend_profile <- a.backend_profile, workers <- a.workers, out <- a.out,
          run_id <- a.run_id, seed <- a.seed);
    if a.replay.is_some() || a.script.is_some() {
        f.replay = a.replay;
        f.script = a.script;
    }
    if a.dump_prompts {
        f.dump_prompts = Some(true);
    }
    let b: &mut BackendOverrides = &mut f.backend;
    if let Some(e) = a.endpoint {
        b.endpoint_url = Some(e);
    }
    if let Some(m) = a.model {
        b.model_id = Some(m);
    }
    if let Some(k) = a.max_iterations {
        f.raffles.get_or_insert_with(Default::default).max_iterations = k;
    }
    if let Some(t) = a.threshold {
        f.raffles.get_or_insert_with(Default::default).confidence_threshold = t;
    }
    if let Some(m) = a.max_tool_calls {
        f.tool_caller.get_or_insert_with(Default::default).max_tool_calls = m;
    }
    Ok(f)
}

fn print_report(results_path: &Path, dataset: &Path, opts: ReportOptions, out: &Path) -> Result<(), CliError> {
    let results = read_results(results_path)?;
    let loaded = load_dataset_dir(dataset)?;
    let report = build_report(&results, &loaded.records, opts)?;
    print!("{}", render_text(&report));
    for p in write_report(&report, out)? {
        log::info!("wrote {}", p.display());
    }
    Ok(())
}

fn summarize(m: &RunManifest) {
    let counts: Vec<String> = m.status_counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!(
        "{}: {} records ({}), {} llm calls, {} ms{}",
        m.run_id,
        m.records.len(),
        counts.join(" "),
        m.llm.calls,
        m.elapsed_ms,
        if m.complete { "" } else { ", INCOMPLETE: rerun with --resume" }
    );
}

fn dispatch(cmd: Command) -> Result<ExitCode, CliError> {
    match cmd {
        Command::Run(a) => {
            let resume = a.resume;
            let tolerance = a.tolerance;
            let cfg = run_config(*a)?.resolve()?;
            let manifest = run(&cfg, RunOptions { resume })?;
            summarize(&manifest);
            if !manifest.complete {
                return Ok(ExitCode::from(1));
            }
            let opts = ReportOptions { max_k: tolerance, metrics: MetricsConfig::default() };
            print_report(&cfg.out, Path::new(&manifest.dataset_dir), opts, &cfg.out)?;
        }
        Command::Report { results, data, tolerance, require_agent, out } => {
            let opts = ReportOptions {
                max_k: tolerance,
                metrics: MetricsConfig { require_agent_for_step: require_agent },
            };
            let out = out.unwrap_or_else(|| {
                if results.is_dir() {
                    results.clone()
                } else {
                    results.parent().map(Path::to_path_buf).unwrap_or_default()
                }
            });
            print_report(&results, &data.dir(), opts, &out)?;
        }
        Command::Stats { data } => {
            let s = stats(&data.dir())?;
            println!("samples:         {}", s.stats.n_samples);
            println!("avg steps:       {:.2}", s.stats.avg_steps);
            println!("avg tokens:      {:.1}", s.stats.avg_token_size);
            println!(
                "trivial agent:   {}% ({}/{}, always {:?})",
                pct(s.trivial_baseline.accuracy),
                s.trivial_baseline.correct,
                s.trivial_baseline.n,
                s.trivial_baseline.agent
            );
            if s.malformed > 0 {
                println!("malformed files: {} (excluded)", s.malformed);
            }
        }
        Command::ValidateDataset { data } => {
            let v = validate_dataset(&data.dir())?;
            println!("{} records parsed", v.n_records);
            for e in &v.malformed {
                println!("malformed: {e}");
            }
            for r in &v.inconsistent {
                println!("inconsistent {}: {}", r.record_id, r.reason);
            }
            if !v.is_clean() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::FaultlabGen { seed, n, out, scenarios } => {
            let recs = faultlab_gen(seed, n, &out, &GeneratorParams::default(), scenarios)?;
            println!("wrote {} records to {}", recs.len(), out.display());
        }
        Command::DumpPrompts { data, record, out } => {
            let loaded = load_dataset_dir(&data.dir())?;
            let rec = loaded
                .records
                .iter()
                .find(|r| r.record_id == record)
                .ok_or_else(|| CliError::ConfigInvalid(format!("no record {record:?}")))?;
            for p in dump_prompts(rec, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Replay { from, out } => {
            let path = from.join("manifest.json");
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            let orig: RunManifest = serde_json::from_str(&text)
                .map_err(|e| CliError::ConfigInvalid(format!("unreadable manifest: {e}")))?;
            let mut cfg = orig.config.clone();
            cfg.source = faultattr::cli::BackendSource::Replay(from.join("transcript.jsonl"));
            cfg.out = out.clone();
            cfg.run_id = format!("{}-replay", orig.run_id);
            let manifest = run(&cfg, RunOptions::default())?;
            summarize(&manifest);
            let a = std::fs::read(from.join("results.jsonl")).unwrap_or_default();
            let b = std::fs::read(out.join("results.jsonl")).unwrap_or_default();
            if a == b {
                println!("results identical to {}", from.display());
            } else {
                println!("results DIFFER from {}", from.display());
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
