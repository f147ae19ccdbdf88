//! C ABI over the faultattr library.
//!
//! Every function returns an [`FaStatus`]. On failure a message is kept per
//! thread and can be read with [`fa_last_error`]. Strings handed out by this
//! library must be released with [`fa_string_free`]; handles with their
//! matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::ptr;
use std::sync::Arc;

use faultattr::attrib::{attribute, evaluator4_rule, Candidate, MethodConfig, MethodKind, RafflesConfig};
use faultattr::backend::{BackendConfig, LlmClient, RetryPolicy, ScriptEntry, ScriptedBackend};
use faultattr::cli::{build_report, ReportOptions};
use faultattr::faultlab::{decisive_fault, parse_scenario, Scenario};
use faultattr::metrics::MetricsConfig;
use faultattr::trace::{parse_record, validate_label, DatasetRecord};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    MalformedRecord = 3,
    InvalidScenario = 4,
    NoDecisiveFault = 5,
    InvalidArgument = 6,
    MethodFailed = 7,
    MetricsFailed = 8,
    Panic = 9,
}

/// Opaque parsed dataset record.
pub struct FaRecord(DatasetRecord);

/// Opaque fault-lab scenario.
pub struct FaScenario(Scenario);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

type FfiResult = Result<(), (FaStatus, String)>;

fn guard(f: impl FnOnce() -> FfiResult) -> FaStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(Ok(())) => FaStatus::Ok,
        Ok(Err((code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            FaStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, (FaStatus, String)> {
    if p.is_null() {
        return Err((FaStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (FaStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

fn check_out<T>(p: *mut T, name: &str) -> FfiResult {
    if p.is_null() {
        Err((FaStatus::NullArgument, format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, (FaStatus, String)> {
    p.as_ref()
        .ok_or_else(|| (FaStatus::NullArgument, format!("{name} is null")))
}

fn to_c(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("no interior nul").into_raw()
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn fa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn fa_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses one dataset record from its JSON text.
///
/// # Safety
/// `json` and `record_id` must be nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fa_record_parse(
    json: *const c_char,
    record_id: *const c_char,
    out: *mut *mut FaRecord,
) -> FaStatus {
    guard(|| {
        check_out(out, "out")?;
        let json = str_arg(json, "json")?;
        let id = str_arg(record_id, "record_id")?;
        let rec = parse_record(json, id).map_err(|e| (FaStatus::MalformedRecord, e.to_string()))?;
        *out = Box::into_raw(Box::new(FaRecord(rec)));
        Ok(())
    })
}

/// # Safety
/// `rec` must come from [`fa_record_parse`] or be null.
#[no_mangle]
pub unsafe extern "C" fn fa_record_free(rec: *mut FaRecord) {
    if !rec.is_null() {
        drop(Box::from_raw(rec));
    }
}

/// Number of steps; 0 for a null handle.
///
/// # Safety
/// `rec` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn fa_record_num_steps(rec: *const FaRecord) -> usize {
    rec.as_ref().map_or(0, |r| r.0.trajectory.len())
}

/// Ground-truth label. `out_agent` receives an owned string.
///
/// # Safety
/// `rec` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn fa_record_label(
    rec: *const FaRecord,
    out_agent: *mut *mut c_char,
    out_step: *mut usize,
) -> FaStatus {
    guard(|| {
        let rec = handle(rec, "rec")?;
        check_out(out_agent, "out_agent")?;
        check_out(out_step, "out_step")?;
        *out_agent = to_c(rec.0.label.mistake_agent.clone());
        *out_step = rec.0.label.mistake_step;
        Ok(())
    })
}

/// Whether the labeled step exists and was taken by the labeled agent.
///
/// # Safety
/// `rec` must be a live handle; `out_consistent` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fa_record_validate(rec: *const FaRecord, out_consistent: *mut bool) -> FaStatus {
    guard(|| {
        let rec = handle(rec, "rec")?;
        check_out(out_consistent, "out_consistent")?;
        let report = validate_label(&rec.0);
        *out_consistent = report.is_consistent;
        if !report.is_consistent {
            set_error(report.reason);
        }
        Ok(())
    })
}

/// The rule-based fourth evaluator's score for a candidate, default scores.
///
/// # Safety
/// `rec` must be a live handle; `agent` nul-terminated; `out_score` writable.
#[no_mangle]
pub unsafe extern "C" fn fa_evaluator4(
    rec: *const FaRecord,
    agent: *const c_char,
    step: usize,
    out_score: *mut u8,
) -> FaStatus {
    guard(|| {
        let rec = handle(rec, "rec")?;
        let agent = str_arg(agent, "agent")?;
        check_out(out_score, "out_score")?;
        let cand = Candidate {
            agent_name: agent.to_string(),
            step_number: step,
            rationales: Default::default(),
        };
        *out_score = evaluator4_rule(&rec.0.trajectory, &cand, &RafflesConfig::default()).0;
        Ok(())
    })
}

/// Runs a method on one record against a JSON-lines script of
/// `{"record_id", "tag", "text"}` entries and returns the result as JSON.
/// `method` is a method name such as `raffles`; `config_json` is a method
/// config object or null for defaults.
///
/// # Safety
/// String arguments must be nul-terminated (`config_json` may be null);
/// `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fa_attribute_scripted(
    rec: *const FaRecord,
    method: *const c_char,
    script_jsonl: *const c_char,
    config_json: *const c_char,
    out_json: *mut *mut c_char,
) -> FaStatus {
    guard(|| {
        let rec = handle(rec, "rec")?;
        let method: MethodKind = str_arg(method, "method")?
            .parse()
            .map_err(|e: String| (FaStatus::InvalidArgument, e))?;
        let script = str_arg(script_jsonl, "script_jsonl")?;
        check_out(out_json, "out_json")?;
        let config: MethodConfig = if config_json.is_null() {
            MethodConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?)
                .map_err(|e| (FaStatus::InvalidArgument, e.to_string()))?
        };
        let mut entries = Vec::new();
        for (i, line) in script.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let e: ScriptEntry = serde_json::from_str(line)
                .map_err(|e| (FaStatus::InvalidArgument, format!("script line {}: {e}", i + 1)))?;
            entries.push(e);
        }
        let client = LlmClient::new(
            Arc::new(ScriptedBackend::from_entries(entries)),
            BackendConfig {
                retry: RetryPolicy::none(),
                ..BackendConfig::default()
            },
        );
        let result = attribute(method, &config, &rec.0.record_id, &rec.0.trajectory, &client)
            .map_err(|e| (FaStatus::MethodFailed, e.to_string()))?;
        *out_json = to_c(serde_json::to_string(&result).expect("result serializes"));
        Ok(())
    })
}

/// Scores results against records. `results_jsonl` holds one result per
/// line and `records_json` a JSON array of dataset records. Writes the
/// report as JSON.
///
/// # Safety
/// String arguments must be nul-terminated; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fa_report_json(
    results_jsonl: *const c_char,
    records_json: *const c_char,
    max_k: usize,
    require_agent_for_step: bool,
    out_json: *mut *mut c_char,
) -> FaStatus {
    guard(|| {
        let results_text = str_arg(results_jsonl, "results_jsonl")?;
        let records_text = str_arg(records_json, "records_json")?;
        check_out(out_json, "out_json")?;
        let results = results_text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| (FaStatus::InvalidArgument, format!("results: {e}")))?;
        let raw: Vec<serde_json::Value> = serde_json::from_str(records_text)
            .map_err(|e| (FaStatus::InvalidArgument, format!("records: {e}")))?;
        let mut records = Vec::with_capacity(raw.len());
        for (i, v) in raw.iter().enumerate() {
            let id = v
                .get("record_id")
                .and_then(|x| x.as_str())
                .map(str::to_string)
                .unwrap_or_else(|| i.to_string());
            records.push(
                parse_record(&v.to_string(), &id).map_err(|e| (FaStatus::MalformedRecord, e.to_string()))?,
            );
        }
        let opts = ReportOptions {
            max_k,
            metrics: MetricsConfig { require_agent_for_step },
        };
        let report =
            build_report(&results, &records, opts).map_err(|e| (FaStatus::MetricsFailed, e.to_string()))?;
        *out_json = to_c(serde_json::to_string(&report).expect("report serializes"));
        Ok(())
    })
}

/// Parses a fault-lab scenario from TOML text.
///
/// # Safety
/// `toml` must be nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fa_scenario_parse(toml: *const c_char, out: *mut *mut FaScenario) -> FaStatus {
    guard(|| {
        check_out(out, "out")?;
        let text = str_arg(toml, "toml")?;
        let s = parse_scenario(text).map_err(|e| (FaStatus::InvalidScenario, e.to_string()))?;
        *out = Box::into_raw(Box::new(FaScenario(s)));
        Ok(())
    })
}

/// # Safety
/// `s` must come from [`fa_scenario_parse`] or be null.
#[no_mangle]
pub unsafe extern "C" fn fa_scenario_free(s: *mut FaScenario) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Rolls the scenario out under its own policy and finds the decisive fault.
/// Returns `NoDecisiveFault` when the run succeeds or no fault is curable.
///
/// # Safety
/// `s` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn fa_scenario_decisive_fault(
    s: *const FaScenario,
    out_agent: *mut *mut c_char,
    out_step: *mut usize,
) -> FaStatus {
    guard(|| {
        let s = &handle(s, "scenario")?.0;
        check_out(out_agent, "out_agent")?;
        check_out(out_step, "out_step")?;
        let run = s.roll();
        let (agent, t) = decisive_fault(s, &run, &s.declared_judge())
            .ok_or((FaStatus::NoDecisiveFault, "no decisive fault".to_string()))?;
        *out_agent = to_c(s.agents[agent.0].clone());
        *out_step = t;
        Ok(())
    })
}
