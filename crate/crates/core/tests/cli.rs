mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::*;
use faultattr::attrib::MethodKind;
use faultattr::cli::RunManifest;
use faultattr::trace::load_dataset_dir;

fn bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_faultattr"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn gen_validate_stats() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = bin(&["faultlab-gen", "--seed", "4", "--n", "5", "--out", "data", "--scenarios"], d);
    assert!(out.status.success());
    assert!(d.join("data/scenarios/5.toml").exists());
    let out = bin(&["validate-dataset", "--dataset", "data"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let out = bin(&["stats", "--dataset", "data"], d);
    assert!(String::from_utf8_lossy(&out.stdout).contains("samples:         5"));

    // a label pointing at the wrong agent is reported and fails the command
    let p = d.join("data/2.json");
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
    v["mistake_agent"] = "Nobody".into();
    fs::write(&p, v.to_string()).unwrap();
    fs::write(d.join("data/9.json"), "{ not json").unwrap();
    let out = bin(&["validate-dataset", "--dataset", "data"], d);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(1));
    assert!(text.contains("inconsistent 2:"), "{text}");
    assert!(text.contains("malformed:"), "{text}");
}

#[test]
fn run_fails_partially_then_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert!(bin(&["faultlab-gen", "--seed", "9", "--n", "6", "--out", "data"], d).status.success());
    let records = load_dataset_dir(&d.join("data")).unwrap().records;
    let full = full_script(&records, MethodKind::Raffles);

    // records 3 and 5 have no script entries, so they fail hard
    let partial: Vec<_> = full.iter().filter(|e| e.record_id != "3" && e.record_id != "5").cloned().collect();
    write_script(&d.join("script.jsonl"), &partial);
    let args = ["run", "--dataset", "data", "--method", "raffles", "--script", "script.jsonl", "--out", "out", "--workers", "3"];
    let out = bin(&args, d);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(&d.join("out"));
    assert!(!m.complete);
    assert_eq!(m.status_counts["failed"], 2);
    assert_eq!(m.records[2].status, "failed");
    assert!(m.records[2].error.as_deref().unwrap().contains("3"));
    let lines = fs::read_to_string(d.join("out/results.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 4);

    // rerunning without --resume is refused
    assert_eq!(bin(&args, d).status.code(), Some(2));

    // an interrupted write leaves half a line behind
    let mut text = lines.clone();
    text.push_str(&lines.lines().next().unwrap()[..30]);
    fs::write(d.join("out/results.jsonl"), text).unwrap();

    write_script(&d.join("script.jsonl"), &full);
    let mut resume = args.to_vec();
    resume.push("--resume");
    let out = bin(&resume, d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(&d.join("out"));
    assert!(m.complete);
    let ids: Vec<String> = fs::read_to_string(d.join("out/results.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["record_id"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(ids, ["1", "2", "3", "4", "5", "6"]);
    assert!(d.join("out/report.txt").exists());
    assert!(d.join("out/accuracy_vs_iteration.csv").exists());
    assert!(m.template_versions.contains_key("judge_instruction"));

    // a different config cannot resume into the same directory
    let mut other = resume.clone();
    other.extend(["--run-id", &m.run_id, "--threshold", "300"]);
    let out = bin(&other, d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash"));

    // replaying the transcript reproduces the results
    let out = bin(&["replay", "--from", "out", "--out", "again"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("identical"));

    let out = bin(&["report", "--results", "out", "--dataset", "data", "--tolerance", "2", "--require-agent", "--out", "rep"], d);
    assert!(out.status.success());
    let csv = fs::read_to_string(d.join("rep/accuracy_vs_k.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn dump_prompts_writes_files() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert!(bin(&["faultlab-gen", "--n", "2", "--out", "data"], d).status.success());
    let out = bin(&["dump-prompts", "--dataset", "data", "--record", "2", "--out", "p"], d);
    assert!(out.status.success());
    assert!(d.join("p/2/raffles_judge_iter1.txt").exists());
    let out = bin(&["dump-prompts", "--dataset", "data", "--record", "7", "--out", "p"], d);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_and_bad_profile() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert!(bin(&["faultlab-gen", "--n", "3", "--out", "data"], d).status.success());
    let records = load_dataset_dir(&d.join("data")).unwrap().records;
    write_script(&d.join("s.jsonl"), &full_script(&records, MethodKind::ChatLlm));
    fs::write(
        d.join("run.toml"),
        "dataset = \"data\"\nmethod = \"chat_llm\"\nscript = \"s.jsonl\"\nout = \"o\"\ndump_prompts = true\n",
    )
    .unwrap();
    let out = bin(&["run", "--config", "run.toml"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("o/prompts/1").is_dir());
    let m = manifest(&d.join("o"));
    assert!(!fs::read_to_string(d.join("o/manifest.json")).unwrap().contains("Bearer"));
    assert_eq!(m.llm.calls, 3);

    let out = bin(&["run", "--config", "run.toml", "--backend-profile", "nope", "--out", "o2"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown backend profile"));
}
