//! One PASS/FAIL/SKIP line per acceptance criterion.
//!
//! Criteria 5 and 9 need the public corpus (`WHO_AND_WHEN_DIR`) and, for 9,
//! a live endpoint (`FAULTATTR_LIVE_ENDPOINT`); without them they print SKIP.
//! Criteria listed in `KNOWN_UNATTAINABLE` must still run and are expected to
//! fail; the test breaks if one of them starts passing.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use faultattr::attrib::{
    binary_search_attribute, chat_llm_attribute, raffles_attribute, AttributionResult, BaselineTrace,
    MethodKind, Prediction, RafflesConfig, Status,
};
use faultattr::backend::ScriptedBackend;
use faultattr::cli::{
    build_report, faultlab_gen, read_results, run, table_row, validate_dataset, write_report,
    ReportOptions, RunConfigFile, RunOptions,
};
use faultattr::faultlab::{
    analyze, decisive_fault, generate_faulty_scenario, generate_scenario, load_scenario, AgentId,
    ActionId, GeneratorParams, Scenario, StateId,
};
use faultattr::metrics::{accuracy_report, status_counts, trivial_agent_baseline, MetricsConfig, ScoredOutcome};
use faultattr::prompting::{
    parse_structured, render_baseline, render_evaluator, render_judge, task_context, BaselinePrompt,
    ParsedAnswer, ParsedJudgment, RepairKind,
};
use faultattr::trace::{
    compute_stats, load_dataset_dir, parse_record, resolve_subset, CharHeuristic, DatasetRecord,
    GroundTruthLabel, Trajectory,
};

/// Criterion ids expected to fail, with the reason.
const KNOWN_UNATTAINABLE: &[(u8, &str)] = &[(
    4,
    "64.49 is not a two-decimal percentage of any k/126 (81/126 = 64.29, 82/126 = 65.08)",
)];

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}
use Verdict::*;

fn fail_if(errors: Vec<String>, pass: String) -> Verdict {
    if errors.is_empty() {
        Pass(pass)
    } else {
        Fail(errors.join("; "))
    }
}

#[test]
fn acceptance() {
    let criteria: [(u8, &str, fn() -> Verdict); 9] = [
        (1, "fault formalism vs exhaustive search", c1_fault_oracle),
        (2, "iterative loop mechanics", c2_loop_mechanics),
        (3, "metric oracles", c3_metric_oracles),
        (4, "published tolerance row through report path", c4_table_row),
        (5, "dataset facts", c5_dataset_facts),
        (6, "binary search bound", c6_binary_search),
        (7, "prompt fidelity and output repair", c7_prompt_fidelity),
        (8, "determinism and replay", c8_determinism),
        (9, "live smoke", c9_live_smoke),
    ];
    let mut unexpected = Vec::new();
    for (id, name, f) in criteria {
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Fail(format!("panicked: {msg}"))
        });
        let ms = start.elapsed().as_millis();
        let known = KNOWN_UNATTAINABLE.iter().find(|(k, _)| *k == id).map(|(_, why)| *why);
        let (tag, detail) = match &verdict {
            Pass(d) => ("PASS", d.clone()),
            Fail(d) => ("FAIL", d.clone()),
            Skip(d) => ("SKIP", d.clone()),
        };
        println!("[{tag}] {id}. {name}: {detail} ({ms} ms)");
        match (&verdict, known) {
            (Fail(_), Some(why)) => println!("       known unattainable: {why}"),
            (Fail(d), None) => unexpected.push(format!("criterion {id} failed: {d}")),
            (Pass(_), Some(_)) => {
                unexpected.push(format!("criterion {id} is listed as unattainable but passed"))
            }
            _ => {}
        }
    }
    assert!(unexpected.is_empty(), "{unexpected:#?}");
}

// ---------------------------------------------------------------- 1

/// Plays the scenario policy from the initial state, optionally forcing one
/// action. Returns visited states and actions.
fn play(s: &Scenario, forced: Option<(usize, ActionId)>) -> (Vec<StateId>, Vec<ActionId>) {
    let mut state = s.initial;
    let (mut states, mut actions) = (vec![state], Vec::new());
    for (t, agent) in s.schedule.iter().enumerate() {
        let a = match forced {
            Some((u, a)) if u == t => a,
            _ => s.policy.table()[agent.0][state.0],
        };
        state = s.transition[state.0][a.0];
        actions.push(a);
        states.push(state);
    }
    (states, actions)
}

struct OracleVerdict {
    faults: BTreeSet<usize>,
    causal: BTreeSet<usize>,
    decisive: Option<(AgentId, usize)>,
}

fn exhaustive(s: &Scenario) -> OracleVerdict {
    let (states, actions) = play(s, None);
    let mut v = OracleVerdict {
        faults: BTreeSet::new(),
        causal: BTreeSet::new(),
        decisive: None,
    };
    if s.success.contains(states.last().unwrap()) {
        return v;
    }
    // every (t, replacement) pair the active agent could have taken
    let mut cures: BTreeSet<usize> = BTreeSet::new();
    for t in 0..s.schedule.len() {
        for &a in &s.agent_actions[s.schedule[t].0] {
            let (cf, _) = play(s, Some((t, a)));
            if s.success.contains(cf.last().unwrap()) {
                cures.insert(t);
            }
        }
    }
    for (t, a) in actions.iter().enumerate() {
        let score = if s.flawed_actions.contains(a) { 1.0 } else { 0.0 };
        if score > s.epsilon {
            v.faults.insert(t);
        }
    }
    v.causal = v.faults.intersection(&cures).copied().collect();
    v.decisive = v.causal.first().map(|&t| (s.schedule[t], t));
    v
}

fn c1_fault_oracle() -> Verdict {
    let start = Instant::now();
    let params = GeneratorParams::default();
    let mut scenarios = Vec::new();
    for seed in 0..30u64 {
        scenarios.push(generate_faulty_scenario(seed, &params, "faulty").0);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        scenarios.push(generate_scenario(&mut rng, &params, "any"));
    }
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/faultlab");
    for e in fs::read_dir(&fixtures).unwrap() {
        scenarios.push(load_scenario(&e.unwrap().path()).unwrap());
    }
    let mut errors = Vec::new();
    let mut with_decisive = 0;
    for (i, s) in scenarios.iter().enumerate() {
        if s.schedule.len() > 12 || s.agent_actions.iter().any(|a| a.len() > 8) {
            errors.push(format!("scenario {i} exceeds the size caps"));
        }
        let run = s.roll();
        let got = analyze(s, &run, &s.declared_judge());
        let want = exhaustive(s);
        let trivial: BTreeSet<usize> = want.faults.difference(&want.causal).copied().collect();
        if got.step_faults != want.faults
            || got.causal_steps != want.causal
            || got.trivial_steps != trivial
            || got.decisive != want.decisive
            || decisive_fault(s, &run, &s.declared_judge()) != want.decisive
        {
            errors.push(format!("scenario {i} ({}) disagrees with exhaustive search", s.name));
        }
        if !got.causal_steps.is_disjoint(&got.trivial_steps)
            || got.causal_steps.union(&got.trivial_steps).copied().collect::<BTreeSet<_>>()
                != got.step_faults
        {
            errors.push(format!("scenario {i}: causal/trivial do not partition step faults"));
        }
        with_decisive += usize::from(want.decisive.is_some());
    }
    let elapsed = start.elapsed();
    if elapsed.as_secs_f64() >= 5.0 {
        errors.push(format!("took {elapsed:?}"));
    }
    fail_if(
        errors,
        format!(
            "{} scenarios ({with_decisive} with a decisive fault) agree, {:.0} ms",
            scenarios.len(),
            elapsed.as_secs_f64() * 1000.0
        ),
    )
}

// ---------------------------------------------------------------- 2

fn raffles_with(
    traj: &Trajectory,
    k: usize,
    iters: &[((&str, usize), [u32; 3])],
) -> AttributionResult {
    let mut s = ScriptedBackend::new();
    for (i, ((agent, step), confs)) in iters.iter().enumerate() {
        s.insert("r", &format!("judge/iter={}", i + 1), judge(agent, *step));
        for (p, c) in confs.iter().enumerate() {
            s.insert("r", &format!("eval{}/iter={}", p + 1, i + 1), eval(*c));
        }
    }
    let cfg = RafflesConfig {
        max_iterations: k,
        ..RafflesConfig::default()
    };
    raffles_attribute("r", traj, &client(s), &cfg).unwrap()
}

fn c2_loop_mechanics() -> Verdict {
    let traj = trajectory(9);
    let mut errors = Vec::new();

    let a = raffles_with(&traj, 2, &[(("WebSurfer", 4), [95, 95, 95])]);
    let a_ok = a.status == Status::Converged
        && a.llm_calls == 4
        && a.history.len() == 1
        && a.history[0].confidences == [95, 95, 95, 100]
        && a.final_prediction == Some(Prediction::new("WebSurfer", 4));
    if !a_ok {
        errors.push(format!("(a) got {:?} after {} calls", a.status, a.llm_calls));
    }

    let b = raffles_with(&traj, 2, &[(("Planner", 3), [67, 67, 66]), (("WebSurfer", 7), [80, 80, 80])]);
    let totals: Vec<u32> = b.history.iter().map(|h| h.total).collect();
    if b.status != Status::MaxIterations
        || totals != [300, 340]
        || b.final_prediction != Some(Prediction::new("WebSurfer", 7))
    {
        errors.push(format!("(b) got {:?} {totals:?} {:?}", b.status, b.final_prediction));
    }

    // step 1 belongs to WebSurfer; step 40 does not exist
    let c1 = raffles_with(&traj, 1, &[(("Planner", 1), [100, 100, 100])]);
    let c2 = raffles_with(&traj, 1, &[(("Planner", 40), [100, 100, 100])]);
    for (name, c) in [("mismatched agent", &c1), ("out of range", &c2)] {
        if c.history[0].confidences[3] != 0 || c.history[0].total != 300 {
            errors.push(format!("(c) {name}: evaluator 4 gave {}", c.history[0].confidences[3]));
        }
    }

    let d = raffles_with(&traj, 1, &[(("Planner", 0), [10, 10, 10]), (("Planner", 3), [90, 90, 90])]);
    let judges = d.history.len();
    if judges != 1 || d.llm_calls != 4 || d.status != Status::MaxIterations {
        errors.push(format!("(d) K=1 ran {judges} judge passes, {} calls", d.llm_calls));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut over = 0;
    for _ in 0..300 {
        let k = rng.random_range(1..=5);
        let iters: Vec<((&str, usize), [u32; 3])> = (0..6)
            .map(|_| {
                let step = rng.random_range(0..9);
                let agent = if rng.random_bool(0.8) { AGENTS[step % 3] } else { "Nobody" };
                ((agent, step), [0; 3].map(|_| rng.random_range(0..=100)))
            })
            .collect();
        let r = raffles_with(&traj, k, &iters);
        let numbered = r.history.iter().enumerate().all(|(i, h)| h.iteration == i + 1);
        if r.history.len() > k || r.history.is_empty() || !numbered {
            over += 1;
        }
    }
    if over > 0 {
        errors.push(format!("(e) {over}/300 random runs broke the history bound"));
    }
    fail_if(errors, "(a)-(e) hold; 300 random scripts keep |history| <= K".into())
}

// ---------------------------------------------------------------- 3

fn random_outcomes(rng: &mut ChaCha8Rng, n: usize) -> Vec<ScoredOutcome> {
    (0..n)
        .map(|i| {
            let truth = Prediction::new(AGENTS[rng.random_range(0..3)], rng.random_range(0..30));
            let predicted = rng
                .random_bool(0.9)
                .then(|| Prediction::new(AGENTS[rng.random_range(0..3)], rng.random_range(0..30)));
            ScoredOutcome {
                record_id: i.to_string(),
                predicted,
                truth,
                status: Status::ALL[rng.random_range(0..Status::ALL.len())],
            }
        })
        .collect()
}

fn c3_metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut errors = Vec::new();
    let cfg = MetricsConfig::default();
    for set in 0..1000 {
        let n = rng.random_range(1..=60);
        let outs = random_outcomes(&mut rng, n);
        let r = accuracy_report(&outs, 12, cfg).unwrap();
        let v: Vec<f64> = r.tolerant_step.values().copied().collect();
        if v.windows(2).any(|w| w[1] < w[0]) {
            errors.push(format!("set {set}: tolerant accuracy decreases"));
        }
        if r.tolerant_step[&0] != r.strict_step {
            errors.push(format!("set {set}: tolerant(0) != strict"));
        }
    }
    let mut recounted = 0;
    for set in 0..500 {
        let n = rng.random_range(1..=20);
        let outs = random_outcomes(&mut rng, n);
        for require_agent in [false, true] {
            let cfg = MetricsConfig {
                require_agent_for_step: require_agent,
            };
            let r = accuracy_report(&outs, 5, cfg).unwrap();
            for k in 0..=5usize {
                let mut c = 0;
                for o in &outs {
                    if let Some(p) = &o.predicted {
                        let d = if p.step_number > o.truth.step_number {
                            p.step_number - o.truth.step_number
                        } else {
                            o.truth.step_number - p.step_number
                        };
                        if d <= k && (!require_agent || p.agent_name == o.truth.agent_name) {
                            c += 1;
                        }
                    }
                }
                if r.tolerant_correct[&k] != c || r.tolerant_step[&k] != c as f64 / n as f64 {
                    errors.push(format!("set {set} k={k}: recount {c}, got {}", r.tolerant_correct[&k]));
                }
            }
            let agent = outs
                .iter()
                .filter(|o| o.predicted.as_ref().is_some_and(|p| p.agent_name == o.truth.agent_name))
                .count();
            if r.agent_correct != agent || r.agent_level != agent as f64 / n as f64 {
                errors.push(format!("set {set}: agent recount {agent}, got {}", r.agent_correct));
            }
        }
        let counts = status_counts(&outs);
        for st in Status::ALL {
            if counts[st] != outs.iter().filter(|o| o.status == *st).count() {
                errors.push(format!("set {set}: status count for {st:?}"));
            }
        }
        let trivial = trivial_agent_baseline(outs.iter().map(|o| o.truth.agent_name.as_str())).unwrap();
        let mut best = (0, "");
        // normalized names of AGENTS sort as planner < verification_expert < websurfer
        for name in ["Planner", "Verification_Expert", "WebSurfer"] {
            let c = outs.iter().filter(|o| o.truth.agent_name == name).count();
            if c > best.0 {
                best = (c, name);
            }
        }
        if trivial.correct != best.0 || trivial.agent != best.1 {
            errors.push(format!("set {set}: trivial baseline {:?} vs {best:?}", trivial.agent));
        }
        recounted += 1;
    }
    errors.truncate(5);
    fail_if(
        errors,
        format!("1000 sets monotone with tolerant(0) = strict; {recounted} sets match a brute-force recount"),
    )
}

// ---------------------------------------------------------------- 4

#[derive(serde::Deserialize)]
struct TableFixture {
    label: String,
    n: usize,
    /// `[distance, count]`: that many predictions miss the labeled step by `distance`.
    distance_counts: Vec<(usize, usize)>,
    expected: Vec<String>,
}

fn c4_table_row() -> Verdict {
    let text = fs::read_to_string(golden("tolerance_rows.json")).unwrap();
    let fixtures: Vec<TableFixture> = serde_json::from_str(&text).unwrap();
    let mut errors = Vec::new();
    let mut passed = Vec::new();
    for fx in &fixtures {
        let mut records = Vec::new();
        let mut results = Vec::new();
        for (d, count) in &fx.distance_counts {
            for _ in 0..*count {
                let id = (records.len() + 1).to_string();
                records.push(DatasetRecord {
                    record_id: id.clone(),
                    trajectory: trajectory(30),
                    label: GroundTruthLabel {
                        mistake_agent: "Planner".into(),
                        mistake_step: 12,
                        mistake_reason: None,
                    },
                    ground_truth_answer: None,
                });
                results.push(AttributionResult {
                    method: MethodKind::ChatLlm,
                    record_id: id,
                    final_prediction: Some(Prediction::new("Planner", 12 + d)),
                    status: Status::Completed,
                    llm_calls: 1,
                    history: Vec::new(),
                    trace: None,
                    parses: Vec::new(),
                });
            }
        }
        assert_eq!(records.len(), fx.n, "{} fixture size", fx.label);

        let dir = tempfile::tempdir().unwrap();
        let lines: String = results.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
        fs::write(dir.path().join("results.jsonl"), lines).unwrap();
        let read = read_results(dir.path()).unwrap();
        let report = build_report(&read, &records, ReportOptions::default()).unwrap();
        write_report(&report, dir.path()).unwrap();
        let txt = fs::read_to_string(dir.path().join("report.txt")).unwrap();

        let row = table_row(&report.accuracy);
        let cells: Vec<&str> = row.split(" & ").collect();
        let mut bad = Vec::new();
        for (i, want) in fx.expected.iter().enumerate() {
            let label = if i == 0 { "strict".to_string() } else { format!("±{i}") };
            if cells.get(i) != Some(&want.as_str()) {
                bad.push(format!("{label} {} != {want}", cells.get(i).unwrap_or(&"-")));
            }
            if !txt.contains(&format!("{want}%")) && cells.get(i) == Some(&want.as_str()) {
                bad.push(format!("{label} missing from report.txt"));
            }
        }
        if bad.is_empty() {
            passed.push(fx.label.clone());
        } else {
            errors.push(format!("{}: {}", fx.label, bad.join(", ")));
        }
    }
    fail_if(errors, format!("rows reproduced: {}", passed.join(", ")))
}

// ---------------------------------------------------------------- 5

fn c5_dataset_facts() -> Verdict {
    let Ok(root) = std::env::var("WHO_AND_WHEN_DIR") else {
        return Skip("set WHO_AND_WHEN_DIR to the corpus root".into());
    };
    let root = PathBuf::from(root);
    let pick = |names: &[&str]| {
        names
            .iter()
            .map(|n| resolve_subset(&root, Some(n)))
            .find(|p| p.is_dir())
    };
    let Some(alg) = pick(&["Algorithm-Generated", "Algorithmically-Generated"]) else {
        return Fail("no algorithm-generated subset under the corpus root".into());
    };
    let Some(hand) = pick(&["Hand-Crafted"]) else {
        return Fail("no Hand-Crafted subset under the corpus root".into());
    };
    let mut errors = Vec::new();
    let mut facts = Vec::new();
    for (dir, n, avg, bad_ids) in [
        (&alg, 126, 8.72, ["14", "15", "59"]),
        (&hand, 58, 50.60, ["20", "22", "49"]),
    ] {
        let loaded = load_dataset_dir(dir).unwrap();
        if !loaded.errors.is_empty() {
            errors.push(format!("{}: {} unparseable records", dir.display(), loaded.errors.len()));
        }
        let stats = compute_stats(&loaded.records, &CharHeuristic).unwrap();
        if stats.n_samples != n {
            errors.push(format!("{}: n={} (want {n})", dir.display(), stats.n_samples));
        }
        if (stats.avg_steps - avg).abs() > 0.01 {
            errors.push(format!("{}: avg steps {:.4} (want {avg})", dir.display(), stats.avg_steps));
        }
        let v = validate_dataset(dir).unwrap();
        let ids: BTreeSet<&str> = v.inconsistent.iter().map(|r| r.record_id.as_str()).collect();
        let want: BTreeSet<&str> = bad_ids.into_iter().collect();
        if ids != want {
            errors.push(format!("{}: inconsistent {ids:?} (want {want:?})", dir.display()));
        }
        facts.push(format!("n={} avg={:.2}", stats.n_samples, stats.avg_steps));
    }
    let hand_records = load_dataset_dir(&hand).unwrap().records;
    let t = trivial_agent_baseline(hand_records.iter().map(|r| r.label.mistake_agent.as_str())).unwrap();
    if (t.correct, t.n) != (33, 58) {
        errors.push(format!("trivial baseline {}/{} (want 33/58)", t.correct, t.n));
    }
    fail_if(errors, format!("{}; 3+3 inconsistent ids; trivial {}/{}", facts.join(", "), t.correct, t.n))
}

// ---------------------------------------------------------------- 6

fn bs_run(t: usize, path: &[bool]) -> AttributionResult {
    let mut s = ScriptedBackend::new();
    for (q, upper) in path.iter().enumerate() {
        let j = if *upper { "upper half" } else { "lower half" };
        s.insert("r", &format!("bs/query={}", q + 1), verdict(j));
    }
    binary_search_attribute("r", &trajectory(t), &client(s)).unwrap()
}

fn c6_binary_search() -> Verdict {
    let mut errors = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut runs = 0;
    for t in 1..=64usize {
        let bound = (t as f64).log2().ceil() as usize;
        let paths: Vec<Vec<bool>> = if t <= 8 {
            (0..1u32 << bound)
                .map(|bits| (0..bound).map(|i| bits >> i & 1 == 1).collect())
                .collect()
        } else {
            (0..40).map(|_| (0..bound).map(|_| rng.random_bool(0.5)).collect()).collect()
        };
        let mut reached = BTreeSet::new();
        for p in &paths {
            let r = bs_run(t, p);
            runs += 1;
            let queries = match &r.trace {
                Some(BaselineTrace::BinarySearch { queries }) => queries.len(),
                _ => usize::MAX,
            };
            let step = r.final_prediction.as_ref().map(|p| p.step_number);
            if queries > bound || r.llm_calls as usize > bound || step.is_none_or(|s| s >= t) {
                errors.push(format!("T={t} path {p:?}: {queries} queries, step {step:?}"));
            }
            reached.extend(step);
        }
        if t <= 8 && reached.len() != t {
            errors.push(format!("T={t}: all paths reach only {reached:?}"));
        }
    }
    errors.truncate(5);
    fail_if(errors, format!("{runs} runs within ceil(log2 T) queries; every step reachable for T<=8"))
}

// ---------------------------------------------------------------- 7

/// Fills `{name}` and unescapes `{{`/`}}` in a template box.
fn fill_box(text: &str, bindings: &[(&str, &str)]) -> String {
    let mut out = String::new();
    let mut rest = text;
    while let Some(i) = rest.find(['{', '}']) {
        out.push_str(&rest[..i]);
        let tail = &rest[i..];
        if tail.starts_with("{{") || tail.starts_with("}}") {
            out.push_str(&tail[..1]);
            rest = &tail[2..];
        } else if tail.starts_with('{') {
            let close = tail.find('}').expect("unclosed placeholder in box");
            let name = &tail[1..close];
            let value = bindings
                .iter()
                .find(|(k, _)| *k == name)
                .unwrap_or_else(|| panic!("box placeholder {name} unbound"))
                .1;
            out.push_str(value);
            rest = &tail[close + 1..];
        } else {
            panic!("stray '}}' in box");
        }
    }
    out.push_str(rest);
    out
}

fn read_box(name: &str) -> String {
    let t = fs::read_to_string(golden(&format!("boxes/{name}.txt"))).unwrap();
    t.strip_suffix('\n').unwrap_or(&t).to_string()
}

fn first_difference(a: &str, b: &str) -> String {
    let i = a.chars().zip(b.chars()).take_while(|(x, y)| x == y).count();
    let ctx = |s: &str| s.chars().skip(i.saturating_sub(20)).take(50).collect::<String>();
    format!("at char {i}: rendered {:?} vs box {:?}", ctx(a), ctx(b))
}

fn golden_prompts(rec: &DatasetRecord) -> Vec<(String, String, String)> {
    let t = &rec.trajectory;
    let ctx = task_context(t);
    let wrapper = |d: &str, m: &str, o: &str| {
        fill_box(&read_box("wrapper"), &[("task_description", d), ("input_metadata", m), ("task_output", o)])
    };
    let mut cases = Vec::new();
    cases.push((
        "judge".to_string(),
        render_judge(t, None).unwrap(),
        wrapper(&fill_box(&read_box("judge_instruction"), &[]), &ctx, &fill_box(&read_box("judge_output"), &[])),
    ));
    let cand = ParsedJudgment {
        agent_name: "Orchestrator".into(),
        step_number: 2,
        mistake_reason: "counted 2011 as in range".into(),
        first_mistake: "earlier steps listed the years correctly".into(),
        mistake_not_corrected: "the verifier accepted 4".into(),
    };
    let rationale = [&cand.mistake_reason, &cand.first_mistake, &cand.mistake_not_corrected];
    let keys = ["mistake_reason", "first_mistake", "mistake_not_corrected"];
    for p in 1..=3u8 {
        let i = usize::from(p - 1);
        let error_step = format!(
            "{{\n  \"agent_name\": \"{}\",\n  \"step_number\": {},\n  \"{}\": \"{}\"\n}}",
            cand.agent_name, cand.step_number, keys[i], rationale[i]
        );
        cases.push((
            format!("evaluator_{p}"),
            render_evaluator(p, t, &cand).unwrap(),
            fill_box(&read_box(&format!("evaluator_{p}")), &[("task_log", &ctx), ("error_step", &error_step)]),
        ));
    }
    cases.push((
        "chat_llm".into(),
        render_baseline(&BaselinePrompt::ChatLlm { trajectory: t }).unwrap(),
        fill_box(&read_box("chat_llm"), &[("problem", &t.problem), ("failure_log", &t.render_log())]),
    ));
    let sbs_meta = format!("problem: {}\n\nhistory_up_to_step:\n{}", t.problem, t.render_prefix(2));
    cases.push((
        "step_by_step".into(),
        render_baseline(&BaselinePrompt::StepByStep { trajectory: t, step: 2 }).unwrap(),
        wrapper(&fill_box(&read_box("step_by_step_instruction"), &[]), &sbs_meta, &read_box("step_by_step_output")),
    ));
    let bs_meta = format!("problem: {}\n\nconversation segment [0, 3]:\n{}", t.problem, t.render_range(0, 3));
    cases.push((
        "binary_search".into(),
        render_baseline(&BaselinePrompt::BinarySearch { trajectory: t, lo: 0, mid: 1, hi: 3 }).unwrap(),
        wrapper(
            &fill_box(
                &read_box("binary_search_instruction"),
                &[("lower_half_range", "[0, 1]"), ("upper_half_range", "[2, 3]")],
            ),
            &bs_meta,
            &read_box("binary_search_output"),
        ),
    ));
    cases.push((
        "tool_caller_planner".into(),
        render_baseline(&BaselinePrompt::ToolCallerPlanner { trajectory: t }).unwrap(),
        fill_box(&read_box("tool_caller_planner"), &[("input_data['metadata']", &ctx)]),
    ));
    let history = format!("problem: {}\n{}", t.problem, t.render_prefix(1));
    cases.push((
        "tool_caller_judge".into(),
        render_baseline(&BaselinePrompt::ToolCallerJudge { trajectory: t, step: 1 }).unwrap(),
        fill_box(&read_box("tool_caller_judge"), &[("prompt_history", &history)]),
    ));
    cases
}

#[derive(serde::Deserialize)]
struct MalformedCase {
    name: String,
    text: String,
    reask_reply: Option<String>,
    agent: String,
    step: usize,
    repair: RepairKind,
}

fn repair_case(c: &MalformedCase, rec: &DatasetRecord) -> Result<(), String> {
    let direct = parse_structured::<ParsedAnswer>(&c.text);
    match &c.reask_reply {
        None => {
            let v = direct.value.ok_or_else(|| format!("not recovered: {:?}", direct.error))?;
            if (v.agent_name.as_str(), v.step_number) != (c.agent.as_str(), c.step as i64) {
                return Err(format!("recovered ({}, {})", v.agent_name, v.step_number));
            }
            if direct.repair_applied != c.repair {
                return Err(format!("classified {:?}", direct.repair_applied));
            }
        }
        Some(reply) => {
            if direct.value.is_some() {
                return Err("parsed without the re-ask".into());
            }
            let s = ScriptedBackend::new()
                .with("r", "chat_llm", c.text.clone())
                .with("r", "chat_llm/repair", reply.clone());
            let r = chat_llm_attribute("r", &rec.trajectory, &client(s)).map_err(|e| e.to_string())?;
            let last = r.parses.last().map(|p| p.repair_applied).unwrap_or(RepairKind::None);
            if r.final_prediction != Some(Prediction::new(&c.agent, c.step)) || last != c.repair || r.llm_calls != 2 {
                return Err(format!("re-ask gave {:?} classified {last:?}", r.final_prediction));
            }
        }
    }
    Ok(())
}

fn c7_prompt_fidelity() -> Verdict {
    let raw = fs::read_to_string(golden("canonical_record.json")).unwrap();
    let rec = parse_record(&raw, "canonical").unwrap();
    let mut errors = Vec::new();
    let prompts = golden_prompts(&rec);
    for (name, rendered, expected) in &prompts {
        if rendered != expected {
            errors.push(format!("{name} {}", first_difference(rendered, expected)));
        }
    }
    let corpus: Vec<MalformedCase> =
        serde_json::from_str(&fs::read_to_string(golden("malformed_outputs.json")).unwrap()).unwrap();
    let mut recovered = 0;
    for c in &corpus {
        match catch_unwind(AssertUnwindSafe(|| repair_case(c, &rec))) {
            Ok(Ok(())) => recovered += 1,
            Ok(Err(e)) => errors.push(format!("corpus {}: {e}", c.name)),
            Err(_) => errors.push(format!("corpus {}: crashed", c.name)),
        }
    }
    fail_if(
        errors,
        format!("{} prompts match their boxes; {recovered}/{} malformed outputs recovered and classified", prompts.len(), corpus.len()),
    )
}

// ---------------------------------------------------------------- 8

fn c8_determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let records = faultlab_gen(5, 8, &data, &GeneratorParams::default(), false).unwrap();
    let mut errors = Vec::new();
    for kind in MethodKind::ALL.iter().copied() {
        let script = tmp.path().join(format!("{}.jsonl", kind.as_str()));
        write_script(&script, &full_script(&records, kind));
        let run_into = |out: &Path, workers: usize, replay: Option<PathBuf>| {
            let f = RunConfigFile {
                dataset: Some(data.clone()),
                method: Some(kind),
                script: replay.is_none().then(|| script.clone()),
                replay,
                workers: Some(workers),
                out: Some(out.to_path_buf()),
                seed: Some(workers as u64),
                ..Default::default()
            };
            run(&f.resolve().unwrap(), RunOptions::default()).unwrap()
        };
        let a = tmp.path().join(format!("{}-a", kind.as_str()));
        let b = tmp.path().join(format!("{}-b", kind.as_str()));
        let c = tmp.path().join(format!("{}-replay", kind.as_str()));
        let ma = run_into(&a, 4, None);
        run_into(&b, 1, None);
        run_into(&c, 2, Some(a.join("transcript.jsonl")));
        let bytes = |d: &Path| fs::read(d.join("results.jsonl")).unwrap();
        if !ma.complete {
            errors.push(format!("{}: run incomplete", kind.as_str()));
        }
        if bytes(&a) != bytes(&b) {
            errors.push(format!("{}: two scripted runs differ", kind.as_str()));
        }
        if read_results(&a).unwrap() != read_results(&c).unwrap() {
            errors.push(format!("{}: replay differs from the original", kind.as_str()));
        }
    }
    fail_if(errors, format!("{} methods byte-identical across runs and under replay", MethodKind::ALL.len()))
}

// ---------------------------------------------------------------- 9

fn c9_live_smoke() -> Verdict {
    let (Ok(endpoint), Ok(root)) = (std::env::var("FAULTATTR_LIVE_ENDPOINT"), std::env::var("WHO_AND_WHEN_DIR")) else {
        return Skip("set FAULTATTR_LIVE_ENDPOINT and WHO_AND_WHEN_DIR".into());
    };
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("five");
    fs::create_dir_all(&data).unwrap();
    let src = ["Algorithm-Generated", "Algorithmically-Generated"]
        .iter()
        .map(|s| resolve_subset(Path::new(&root), Some(s)))
        .find(|p| p.is_dir())
        .unwrap_or_else(|| PathBuf::from(&root));
    let loaded = load_dataset_dir(&src).unwrap();
    for r in loaded.records.iter().take(5) {
        fs::copy(src.join(format!("{}.json", r.record_id)), data.join(format!("{}.json", r.record_id))).unwrap();
    }
    let mut errors = Vec::new();
    let mut calls = Vec::new();
    for kind in [MethodKind::Raffles, MethodKind::ChatLlm] {
        let mut f = RunConfigFile {
            dataset: Some(data.clone()),
            method: Some(kind),
            backend_profile: std::env::var("FAULTATTR_LIVE_PROFILE").ok(),
            out: Some(tmp.path().join(kind.as_str())),
            ..Default::default()
        };
        f.backend.endpoint_url = Some(endpoint.clone());
        f.backend.model_id = std::env::var("FAULTATTR_LIVE_MODEL").ok();
        f.backend.credential_env = std::env::var("FAULTATTR_LIVE_KEY_ENV").ok();
        match f.resolve().and_then(|cfg| run(&cfg, RunOptions::default())) {
            Ok(m) if m.complete => {
                if kind == MethodKind::Raffles {
                    calls = m.records.iter().map(|r| r.llm_calls).collect();
                    if calls.iter().any(|c| *c != 4 && *c != 8) {
                        errors.push(format!("RAFFLES llm_calls {calls:?} not all in {{4, 8}}"));
                    }
                }
            }
            Ok(m) => errors.push(format!("{}: {:?}", kind.as_str(), m.status_counts)),
            Err(e) => errors.push(format!("{}: {e}", kind.as_str())),
        }
    }
    fail_if(errors, format!("5 records end-to-end; RAFFLES llm_calls {calls:?}"))
}
