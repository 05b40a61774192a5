//! Acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{oracle_closing, replay_providers, shipped_fixtures, synthetic_trace, MemorySink};
use policybank::bank::{apply_review_ops, check_invariants, BankSnapshot, PolicyEntry, ReviewOp, SpecNl};
use policybank::environment::{builtin_domain, DomainBundle, BUILTIN_DOMAINS};
use policybank::evaluation::{gap_closure, grade_task, pass_hat_k, run_stream, stream_order, Judge, RunReport};
use policybank::provider::{ChatProvider, ChatRequest, ChatResponse, FixtureRecord, ProviderError};
use policybank::reviewer::{
    parse_review_output, review_step, validate_ops, ProposedEntry, ReviewContext, ReviewError, ReviewVerdict,
};
use policybank::runtime::{MemoryStrategyKind, RunConfig};
use policybank::scripted::{scripted_models, AgentMode, REVIEWER_MODEL};
use policybank::{Feedback, FeedbackSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PASS_K_BUDGET: Duration = Duration::from_secs(1);
const ISOLATION_BUDGET: Duration = Duration::from_secs(10);
const UPDATE_BUDGET: Duration = Duration::from_secs(30);
const METRIC_TOL: f64 = 1e-12;
const CLOSURE_TOL: f64 = 0.001;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn domains() -> Vec<DomainBundle> {
    BUILTIN_DOMAINS.iter().map(|d| builtin_domain(d).unwrap()).collect()
}

fn brute_pass_k(trials: &[bool], k: usize) -> f64 {
    let n = trials.len();
    let (mut all, mut total) = (0u32, 0u32);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        total += 1;
        if (0..n).filter(|i| mask & (1 << i) != 0).all(|i| trials[i]) {
            all += 1;
        }
    }
    f64::from(all) / f64::from(total)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut exact = 0;
    for n in 1..=6usize {
        for pattern in 0u32..(1 << n) {
            let trials: Vec<bool> = (0..n).map(|i| pattern & (1 << i) != 0).collect();
            for k in 1..=n {
                let got = pass_hat_k(std::slice::from_ref(&trials), k).unwrap();
                let want = brute_pass_k(&trials, k);
                check((got - want).abs() < METRIC_TOL, || {
                    format!("n={n} trials={trials:?} k={k}: {got} vs {want}")
                })?;
                exact += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..10_000 {
        let n = rng.random_range(1..=6usize);
        let tasks = rng.random_range(1..=5usize);
        let mut outcomes: Vec<Vec<bool>> = (0..tasks)
            .map(|_| (0..n).map(|_| rng.random_bool(0.5)).collect())
            .collect();
        let values: Vec<f64> = (1..=n).map(|k| pass_hat_k(&outcomes, k).unwrap()).collect();
        check(values.iter().all(|v| (0.0..=1.0).contains(v)), || {
            format!("case {case}: out of range {values:?}")
        })?;
        check(values.windows(2).all(|w| w[1] <= w[0] + METRIC_TOL), || {
            format!("case {case}: not non-increasing in k {values:?}")
        })?;
        let t = rng.random_range(0..tasks);
        if let Some(slot) = outcomes[t].iter_mut().find(|b| !**b) {
            *slot = true;
            for (k, before) in (1..=n).zip(&values) {
                let after = pass_hat_k(&outcomes, k).unwrap();
                check(after + METRIC_TOL >= *before, || {
                    format!("case {case}: extra success lowered pass^{k}")
                })?;
            }
        }
    }
    let elapsed = start.elapsed();
    check(elapsed < PASS_K_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!("{exact} exact cases, 10000 randomized, {elapsed:.2?}"))
}

fn criterion_2() -> Outcome {
    let v = gap_closure(0.74, 0.01, 0.90).map_err(|e| e.to_string())?;
    check((v - 0.820).abs() <= CLOSURE_TOL, || format!("gap closure {v:.4}"))?;
    Ok(format!("gap closure {v:.4}"))
}

fn split(report: &RunReport, name: &str) -> Option<f64> {
    report.splits.iter().find(|s| s.split == name).map(|s| s.pass_k[0])
}

fn replay_run(bundle: &DomainBundle, cfg: &RunConfig, sink: &MemorySink) -> Result<RunReport, String> {
    run_stream(bundle, cfg, &replay_providers(), sink, None).map_err(|e| format!("{}: {e}", bundle.name))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig {
        memory_strategy: MemoryStrategyKind::None,
        models: scripted_models(AgentMode::Literal),
        ..RunConfig::default()
    };
    let mut detail = Vec::new();
    for bundle in domains() {
        let report = replay_run(&bundle, &cfg, &MemorySink::default())?;
        let sister = split(&report, "sister");
        let control = split(&report, "control");
        check(sister == Some(0.0) && control == Some(1.0), || {
            format!("{}: sister {sister:?} control {control:?}", bundle.name)
        })?;
        detail.push(format!("{} sister 0.000 control 1.000", bundle.name));
    }
    let elapsed = start.elapsed();
    check(elapsed < ISOLATION_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!("{}, {elapsed:.2?}", detail.join(", ")))
}

fn update_config() -> RunConfig {
    RunConfig {
        memory_strategy: MemoryStrategyKind::Policybank,
        models: scripted_models(AgentMode::Adaptive),
        ..RunConfig::default()
    }
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut families = 0;
    for bundle in domains() {
        let sink = MemorySink::default();
        let report = replay_run(&bundle, &update_config(), &sink)?;
        // (gap, stage) -> (successes, attempts)
        let mut by_family: BTreeMap<(String, String), (usize, usize)> = BTreeMap::new();
        for stream in &report.streams {
            for r in &stream.results {
                if let Some(g) = &r.gap_id {
                    let cell = by_family.entry((g.clone(), r.stage.clone())).or_default();
                    cell.0 += usize::from(r.reward);
                    cell.1 += 1;
                }
            }
        }
        for gap in &bundle.gaps {
            let mean = |stage: &str| {
                by_family
                    .get(&(gap.gap_id.clone(), stage.to_string()))
                    .map(|(p, n)| *p as f64 / *n as f64)
            };
            let (parent, t1, t2) = (mean("parent"), mean("t-1"), mean("t-2"));
            check(parent == Some(0.0) && t1 == Some(1.0) && t2 == Some(1.0), || {
                format!(
                    "{} {}: parent {parent:?} t-1 {t1:?} t-2 {t2:?}",
                    bundle.name, gap.gap_id
                )
            })?;
            let key = gap.key_condition.to_lowercase();
            for stream in &report.streams {
                for r in stream
                    .results
                    .iter()
                    .filter(|r| r.stage == "parent" && r.gap_id.as_ref() == Some(&gap.gap_id))
                {
                    let snapshot = sink
                        .snapshot_after(stream.seed, stream.trial, &r.task_id)
                        .ok_or_else(|| format!("no post-parent snapshot for {}", r.task_id))?;
                    let hit = snapshot
                        .entries
                        .iter()
                        .any(|e| gap.affected_tools.contains(&e.tool) && e.render().to_lowercase().contains(&key));
                    check(hit, || {
                        format!(
                            "{} s{}-t{}: bank after {} lacks {:?}",
                            gap.gap_id, stream.seed, stream.trial, r.task_id, gap.key_condition
                        )
                    })?;
                }
            }
            families += 1;
        }
    }
    let elapsed = start.elapsed();
    check(elapsed < UPDATE_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{families} gap families: parent 0, t-1 1, t-2 1, key condition banked, {elapsed:.2?}"
    ))
}

fn random_entry(rng: &mut ChaCha8Rng, tools: &[String], id: u32) -> PolicyEntry {
    let tool = tools[rng.random_range(0..tools.len())].clone();
    let cap = ["refunds", "eligibility", "limits", "exceptions"][rng.random_range(0..4)];
    PolicyEntry::new(
        id,
        tool,
        cap,
        SpecNl {
            trigger: format!("trigger {}", rng.random_range(0..100)),
            preconditions: "caller verified".into(),
            eligibility: format!("rule {}", rng.random_range(0..100)),
            action: "act".into(),
            key_insight: None,
            freeform: None,
        },
    )
}

fn criterion_5() -> Outcome {
    let bundle = builtin_domain("mini_airline").unwrap();
    let tools: Vec<String> = bundle.tool_names().into_iter().collect();
    let mut proposal_tools = tools.clone();
    proposal_tools.push("not_a_tool".into());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut applied = 0;
    for seq in 0..10_000 {
        let mut bank = BankSnapshot::empty("init");
        for _ in 0..rng.random_range(1..=6) {
            let step = bank.step + 1;
            let next = if rng.random_bool(0.5) {
                let entries = (0..rng.random_range(0..4))
                    .map(|_| {
                        let id = rng.random_range(0..6);
                        let e = random_entry(&mut rng, &proposal_tools, id);
                        ProposedEntry {
                            id: e.id,
                            tool: e.tool,
                            capability: e.capability,
                            spec_nl: e.spec_nl.render(),
                        }
                    })
                    .collect();
                let verdict = ReviewVerdict {
                    overall_success: false,
                    decision_explanation: "fuzz".into(),
                    entries,
                };
                let ops = validate_ops(&verdict, &bank, &bundle);
                apply_review_ops(&bank, &ops.ops, step, "fuzz")
            } else {
                let ops: Vec<ReviewOp> = (0..rng.random_range(0..4))
                    .map(|_| match rng.random_range(0..3) {
                        0 => ReviewOp::Add(random_entry(&mut rng, &tools, bank.next_id())),
                        1 => {
                            let id = rng.random_range(1..6);
                            ReviewOp::Revise(random_entry(&mut rng, &tools, id))
                        }
                        _ => ReviewOp::Omit,
                    })
                    .collect();
                apply_review_ops(&bank, &ops, step, "fuzz")
            };
            if let Ok(next) = next {
                let problems = check_invariants(&next, &bundle);
                check(problems.is_empty(), || format!("sequence {seq}: {problems:?}"))?;
                bank = next;
                applied += 1;
            }
        }
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for i in 0..100 {
        let mut bank = BankSnapshot::empty("random");
        bank.step = rng.random_range(0..50);
        let n = rng.random_range(0..8);
        let mut used = BTreeSet::new();
        let mut id = 0;
        while bank.entries.len() < n {
            id += rng.random_range(1..4);
            let e = random_entry(&mut rng, &tools, id);
            if used.insert((e.tool.clone(), e.capability.clone())) {
                bank.entries.push(e);
            }
        }
        let path = dir.path().join(BankSnapshot::file_name(bank.step));
        policybank::bank::save_bank(&bank, &path).map_err(|e| e.to_string())?;
        let first = std::fs::read(&path).unwrap();
        let loaded = policybank::bank::load_bank(&path).map_err(|e| e.to_string())?;
        check(loaded == bank, || format!("bank {i} changed on load"))?;
        policybank::bank::save_bank(&loaded, &path).map_err(|e| e.to_string())?;
        check(std::fs::read(&path).unwrap() == first, || {
            format!("bank {i} bytes changed on resave")
        })?;
    }
    Ok(format!("10000 sequences ({applied} applied steps), 100 round trips"))
}

/// Twenty responses that break the reviewer output contract.
fn malformed_corpus() -> Vec<(&'static str, &'static str)> {
    vec![
        ("", "malformed"),
        ("not json at all", "malformed"),
        ("[]", "malformed"),
        ("{}", "malformed"),
        (
            r#"{"overall_success": "yes", "decision_explanation": "x", "entries": []}"#,
            "malformed",
        ),
        (
            r#"{"overall_success": null, "decision_explanation": "x", "entries": []}"#,
            "malformed",
        ),
        (r#"{"overall_success": true, "entries": []}"#, "breach"),
        (
            r#"{"overall_success": true, "decision_explanation": "", "entries": []}"#,
            "breach",
        ),
        (
            r#"{"overall_success": false, "decision_explanation": "   ", "entries": []}"#,
            "breach",
        ),
        (
            r#"{"overall_success": false, "decision_explanation": 42, "entries": []}"#,
            "breach",
        ),
        (
            r#"{"overall_success": false, "decision_explanation": "x"}"#,
            "malformed",
        ),
        (
            r#"{"overall_success": false, "decision_explanation": "x", "entries": {}}"#,
            "malformed",
        ),
        (
            r#"{"overall_success": false, "decision_explanation": "x", "entries": [1]}"#,
            "malformed",
        ),
        (
            r#"{"overall_success": false, "decision_explanation": "x", "entries": [{"capability": "c", "spec_nl": "s"}]}"#,
            "malformed",
        ),
        (
            r#"{"overall_success": false, "decision_explanation": "x", "entries": [{"tool": 5, "capability": "c", "spec_nl": "s"}]}"#,
            "malformed",
        ),
        (
            r#"{"overall_success": false, "decision_explanation": "x", "entries": [{"tool": "t", "spec_nl": "s"}]}"#,
            "malformed",
        ),
        (
            r#"{"overall_success": false, "decision_explanation": "x", "entries": [{"tool": "t", "capability": "c"}]}"#,
            "malformed",
        ),
        (
            r#"{"overall_success": false, "decision_explanation": "x", "entries": [{"id": -1, "tool": "t", "capability": "c", "spec_nl": "s"}]}"#,
            "malformed",
        ),
        (
            r#"{"overall_success": false, "decision_explanation": "x", "entries": [{"id": "3", "tool": "t", "capability": "c", "spec_nl": "s"}]}"#,
            "malformed",
        ),
        (
            r#"{"overall_success": true, "decision_explanation": "x", "entries": ["#,
            "malformed",
        ),
    ]
}

struct FixedProvider(String);

impl ChatProvider for FixedProvider {
    fn chat(&self, _req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        Ok(ChatResponse::text(self.0.clone()))
    }
}

fn fuzz_raw(rng: &mut ChaCha8Rng, tools: &[String]) -> String {
    let n = rng.random_range(0..4);
    let entries: Vec<serde_json::Value> = (0..n)
        .map(|_| {
            let tool = match rng.random_range(0..4) {
                0 => "unknown_tool".to_string(),
                1 => String::new(),
                _ => tools[rng.random_range(0..tools.len())].clone(),
            };
            let cap = ["refunds", "", "limits", "Refund Rules"][rng.random_range(0..4)];
            let spec = ["TRIGGER: a\nELIGIBILITY: b", "", "free text", "ACTION: c"][rng.random_range(0..4)];
            serde_json::json!({"id": rng.random_range(0..5), "tool": tool, "capability": cap, "spec_nl": spec})
        })
        .collect();
    let doc = serde_json::json!({
        "overall_success": rng.random_bool(0.3),
        "decision_explanation": if rng.random_bool(0.9) { "fuzzed" } else { "" },
        "entries": entries,
    });
    let mut raw = doc.to_string();
    match rng.random_range(0..6) {
        0 => raw.truncate(rng.random_range(0..=raw.len())),
        1 => {
            let i = rng.random_range(0..raw.len());
            raw.replace_range(i..=i, "}");
        }
        2 => raw = format!("```json\n{raw}\n```"),
        _ => {}
    }
    raw
}

fn criterion_6() -> Outcome {
    let mut accepted = 0;
    for entry in std::fs::read_dir(shipped_fixtures()).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let record: FixtureRecord =
            serde_json::from_slice(&std::fs::read(&path).unwrap()).map_err(|e| format!("{}: {e}", path.display()))?;
        if record.request.model != REVIEWER_MODEL {
            continue;
        }
        let text = record.response.text.unwrap_or_default();
        parse_review_output(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        accepted += 1;
    }
    check(accepted > 0, || "no reviewer fixtures shipped".into())?;

    let corpus = malformed_corpus();
    for (raw, kind) in &corpus {
        match (parse_review_output(raw), *kind) {
            (Err(ReviewError::Malformed { .. }), "malformed") | (Err(ReviewError::ContractBreach { .. }), "breach") => {
            }
            (other, _) => return Err(format!("{raw:?}: expected {kind}, got {other:?}")),
        }
    }

    let bundle = builtin_domain("mini_airline").unwrap();
    let tools: Vec<String> = bundle.tool_names().into_iter().collect();
    let task = bundle.tasks.iter().find(|t| t.policy_gap.is_some()).unwrap();
    let traj = synthetic_trace(&bundle, task, &[], "done");
    let feedback = Feedback {
        reward: false,
        explanation: Some("the refund was not issued".into()),
        oracle_clarification: None,
        source: FeedbackSource::Scripted,
    };
    let mut bank = BankSnapshot::empty("init");
    bank.entries
        .push(random_entry(&mut ChaCha8Rng::seed_from_u64(1), &tools, 1));
    let (schema, overview) = (bundle.schema_text(), bundle.tool_overview_text());
    let ctx = ReviewContext::for_bundle(&bundle, &schema, &overview, &bank, &traj, &feedback);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mut ok, mut failed) = (0, 0);
    for case in 0..1_000 {
        let provider = FixedProvider(fuzz_raw(&mut rng, &tools));
        let snapshot = match review_step(&ctx, &bundle, &provider, "fuzz", 1, 1, "fuzz") {
            Ok(outcome) => {
                ok += 1;
                outcome.snapshot
            }
            Err(failure) => {
                failed += 1;
                let fallback = failure.fallback_snapshot(&bank, 1);
                check(fallback.entries == bank.entries, || {
                    format!("case {case}: fallback changed entries")
                })?;
                fallback
            }
        };
        let problems = check_invariants(&snapshot, &bundle);
        check(problems.is_empty(), || format!("case {case}: {problems:?}"))?;
    }
    Ok(format!(
        "{accepted} shipped reviewer outputs parsed, {} malformed rejected, 1000 fuzzed ({ok} applied, {failed} fell back)",
        corpus.len()
    ))
}

fn criterion_7() -> Outcome {
    for bundle in domains() {
        let (a, b) = (MemorySink::default(), MemorySink::default());
        let ra = replay_run(&bundle, &update_config(), &a)?;
        let rb = replay_run(&bundle, &update_config(), &b)?;
        let (ja, jb) = (serde_json::to_vec(&ra).unwrap(), serde_json::to_vec(&rb).unwrap());
        check(ja == jb, || format!("{}: reports differ", bundle.name))?;
        check(a.trajectory_hashes() == b.trajectory_hashes(), || {
            format!("{}: trajectory hashes differ", bundle.name)
        })?;
        for seed in 0..=4 {
            let order = stream_order(&bundle, seed);
            for (pos, id) in order.iter().enumerate() {
                let task = bundle.task(id).unwrap();
                if task.parent_task_id.is_some() {
                    continue;
                }
                let mut sisters: Vec<_> = bundle
                    .tasks
                    .iter()
                    .filter(|t| t.parent_task_id.as_deref() == Some(id.as_str()))
                    .collect();
                sisters.sort_by_key(|t| t.stage());
                for (i, s) in sisters.iter().enumerate() {
                    check(order.get(pos + 1 + i) == Some(&s.task_id), || {
                        format!("{} seed {seed}: {} not at {} after {id}", bundle.name, s.task_id, i + 1)
                    })?;
                }
            }
        }
    }
    Ok("reports and trajectory hashes identical across two runs, sisters follow parents for seeds 0..=4".into())
}

fn criterion_8() -> Outcome {
    let (mut oracle, mut literal) = (0, 0);
    for bundle in domains() {
        for task in &bundle.tasks {
            bundle
                .apply_groundtruth(task)
                .map_err(|e| format!("{}: {e}", task.task_id))?;
            let traj = synthetic_trace(&bundle, task, &[], &oracle_closing(task));
            let grade = grade_task(&traj, task, &bundle, &Judge::Predicates).map_err(|e| e.to_string())?;
            check(grade.reward, || {
                format!("{}: oracle trace failed {:?}", task.task_id, grade.failure_reasons)
            })?;
            oracle += 1;
            if task.is_sister() {
                let gap = bundle
                    .gap_for_task(task)
                    .ok_or_else(|| format!("{}: no gap", task.task_id))?;
                let traj = synthetic_trace(&bundle, task, &gap.affected_tools, "I cannot do that under the policy.");
                let grade = grade_task(&traj, task, &bundle, &Judge::Predicates).map_err(|e| e.to_string())?;
                check(!grade.reward && !grade.db_match, || {
                    format!("{}: literal trace passed", task.task_id)
                })?;
                literal += 1;
            }
        }
    }
    Ok(format!(
        "{oracle} oracle traces pass, {literal} literal sister traces fail on the database"
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("pass^k estimator", criterion_1),
        ("gap closure arithmetic", criterion_2),
        ("type-II isolation", criterion_3),
        ("one-shot policy update", criterion_4),
        ("bank invariants", criterion_5),
        ("reviewer robustness", criterion_6),
        ("determinism", criterion_7),
        ("grading oracle consistency", criterion_8),
    ];
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(why) => {
                failures += 1;
                println!("criterion {}: FAIL {name}: {why}", i + 1);
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
