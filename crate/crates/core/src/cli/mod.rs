//! Batch runner, reporting and dataset tools behind the `faultattr` binary.

mod report;
mod run;
mod tools;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attrib::{MethodConfig, MethodKind, RafflesConfig, ToolCallerConfig};
use crate::backend::{BackendConfig, RetryPolicy};

pub use report::{build_report, read_results, render_text, table_row, write_report, Report, ReportOptions};
pub use run::{run, ManifestRecord, RunManifest, RunOptions};
pub use tools::{dump_prompts, faultlab_gen, stats, validate_dataset, StatsSummary, ValidationSummary};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("{0}")]
    Dataset(#[from] crate::trace::TraceError),
    #[error("{0}")]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

pub(crate) fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Where completions come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendSource {
    Live,
    /// JSON-lines script keyed by record id and tag.
    Script(PathBuf),
    /// A transcript recorded by an earlier run.
    Replay(PathBuf),
}

/// Partial backend settings layered over a named profile.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendOverrides {
    pub endpoint_url: Option<String>,
    pub model_id: Option<String>,
    pub credential_env: Option<String>,
    pub context_limit_tokens: Option<usize>,
    pub max_output_tokens: Option<u32>,
    pub temperature: Option<f64>,
    pub retry: Option<RetryPolicy>,
    pub timeout_s: Option<u64>,
    pub extra: Option<Map<String, Value>>,
}

impl BackendOverrides {
    fn apply(&self, cfg: &mut BackendConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = &self.$f { cfg.$f = v.clone(); })* };
        }
        set!(endpoint_url, model_id, context_limit_tokens, max_output_tokens, temperature, retry, timeout_s);
        if let Some(v) = &self.credential_env {
            cfg.credential_env = Some(v.clone());
        }
        if let Some(extra) = &self.extra {
            for (k, v) in extra {
                cfg.extra.insert(k.clone(), v.clone());
            }
        }
    }
}

/// The run config file. Everything is optional; command-line flags win.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub run_id: Option<String>,
    pub dataset: Option<PathBuf>,
    pub subset: Option<String>,
    pub method: Option<MethodKind>,
    pub backend_profile: Option<String>,
    pub script: Option<PathBuf>,
    pub replay: Option<PathBuf>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub dump_prompts: Option<bool>,
    #[serde(default)]
    pub raffles: Option<RafflesConfig>,
    #[serde(default)]
    pub tool_caller: Option<ToolCallerConfig>,
    #[serde(default)]
    pub backend: BackendOverrides,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| CliError::ConfigInvalid(format!("{}: {e}", path.display())))
    }

    /// Fills every field; `self` should already hold command-line overrides.
    pub fn resolve(self) -> Result<RunConfig, CliError> {
        let missing = |what: &str| CliError::ConfigInvalid(format!("{what} is required"));
        let profile = self.backend_profile.unwrap_or_else(|| "default".into());
        let mut backend = BackendConfig::profile(&profile).ok_or_else(|| {
            CliError::ConfigInvalid(format!(
                "unknown backend profile {profile:?}; known: {}",
                BackendConfig::profile_names().join(", ")
            ))
        })?;
        self.backend.apply(&mut backend);
        let source = match (self.script, self.replay) {
            (Some(_), Some(_)) => {
                return Err(CliError::ConfigInvalid("script and replay are exclusive".into()))
            }
            (Some(p), None) => BackendSource::Script(p),
            (None, Some(p)) => BackendSource::Replay(p),
            (None, None) => BackendSource::Live,
        };
        let mut cfg = RunConfig {
            run_id: String::new(),
            dataset: self.dataset.ok_or_else(|| missing("dataset"))?,
            subset: self.subset,
            method: self.method.ok_or_else(|| missing("method"))?,
            methods: MethodConfig {
                raffles: self.raffles.unwrap_or_default(),
                tool_caller: self.tool_caller.unwrap_or_default(),
            },
            backend_profile: profile,
            backend,
            source,
            workers: self.workers.unwrap_or(1),
            out: self.out.ok_or_else(|| missing("out"))?,
            seed: self.seed.unwrap_or(0),
            dump_prompts: self.dump_prompts.unwrap_or(false),
        };
        cfg.run_id = match self.run_id {
            Some(id) => id,
            None => format!("run-{}", &cfg.hash()[..12]),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Fully expanded run configuration; its hash pins a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_id: String,
    pub dataset: PathBuf,
    pub subset: Option<String>,
    pub method: MethodKind,
    pub methods: MethodConfig,
    pub backend_profile: String,
    pub backend: BackendConfig,
    pub source: BackendSource,
    pub workers: usize,
    pub out: PathBuf,
    pub seed: u64,
    pub dump_prompts: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.workers == 0 {
            return Err(CliError::ConfigInvalid("workers must be at least 1".into()));
        }
        if self.run_id.is_empty() {
            return Err(CliError::ConfigInvalid("run_id is empty".into()));
        }
        self.methods
            .validate()
            .map_err(|e| CliError::ConfigInvalid(e.to_string()))?;
        self.backend
            .validate()
            .map_err(|e| CliError::ConfigInvalid(e.to_string()))
    }

    /// sha256 of the config serialized as JSON, ignoring the run id, worker
    /// count and prompt dumping, none of which change results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run_id.clear();
        c.workers = 1;
        c.dump_prompts = false;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
