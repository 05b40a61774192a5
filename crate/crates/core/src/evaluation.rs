//! Grading against the intended policy, the streaming protocol with sister
//! injection, pass^k and report assembly.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::BankSnapshot;
use crate::environment::{DomainBundle, EffectKind, EnvError, Predicate};
use crate::model::{Feedback, SisterTaskType, TaskSpec, Termination, Trajectory};
use crate::provider::{ChatMessage, ChatProvider, ChatRequest};
use crate::reviewer::{init_bank, InitOutcome};
use crate::runtime::{
    collect_feedback, run_task, ConfigError, HumanFeedback, JudgeMode, MemoryStrategy, MemoryStrategyKind, NoMemory,
    PolicyBankMemory, Providers, ReviewRecord, RunConfig, UpdateInput,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssertionOutcome {
    Pass,
    Fail,
    Skipped,
}

impl AssertionOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            AssertionOutcome::Pass => "pass",
            AssertionOutcome::Fail => "fail",
            AssertionOutcome::Skipped => "skipped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradeResult {
    pub reward: bool,
    pub db_match: bool,
    pub actions_match: bool,
    /// Signatures of expected write actions with no matching call.
    pub missed_actions: Vec<String>,
    pub communicate_match: Vec<(String, bool)>,
    pub assertion_results: Vec<(String, AssertionOutcome)>,
    pub failure_reasons: Vec<String>,
}

/// How assertions are judged for one grade.
pub enum Judge<'a> {
    Off,
    Predicates,
    Model {
        provider: &'a dyn ChatProvider,
        model: &'a str,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("bank initialization failed: {0}")]
    Init(String),
    #[error("task {0} is not in the bundle")]
    UnknownTask(String),
    #[error("persisting run artifacts: {0}")]
    Sink(String),
    #[error("feedback: {0}")]
    Feedback(String),
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("k must satisfy 1 <= k <= n, got k={k}, n={n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("oracle ({oracle}) must exceed baseline ({baseline})")]
    UndefinedGap { baseline: f64, oracle: f64 },
    #[error("no tasks")]
    Empty,
}

/// Case-folds and removes commas and currency symbols.
pub fn normalize_for_match(text: &str) -> String {
    text.chars()
        .filter(|c| !matches!(c, ',' | '$' | '€' | '£' | '¥'))
        .flat_map(char::to_lowercase)
        .collect()
}

fn eval_predicate(p: &Predicate, traj: &Trajectory) -> bool {
    match p {
        Predicate::ToolCalled { tool } => traj.tool_calls().any(|c| &c.tool_name == tool),
        Predicate::ToolNotCalled { tool } => !traj.tool_calls().any(|c| &c.tool_name == tool),
        Predicate::AssistantMentions { text } => {
            normalize_for_match(&traj.assistant_text()).contains(&normalize_for_match(text))
        }
        Predicate::ArgumentsEqual { tool, left, right } => traj.tool_calls().any(|c| {
            &c.tool_name == tool
                && matches!((c.arguments.get(left), c.arguments.get(right)), (Some(a), Some(b)) if a.numeric_eq(b))
        }),
    }
}

fn transcript_for_judge(traj: &Trajectory) -> String {
    crate::reviewer::render_transcript(traj)
}

fn judge_with_model(provider: &dyn ChatProvider, model: &str, traj: &Trajectory, assertion: &str) -> AssertionOutcome {
    let req = ChatRequest::new(
        model,
        vec![
            ChatMessage::system(
                "You check one statement about a customer service conversation. Answer with exactly one word: yes or no.",
            ),
            ChatMessage::user(format!(
                "Conversation:\n{}\n\nStatement: {assertion}\nIs the statement true of the conversation?",
                transcript_for_judge(traj)
            )),
        ],
    );
    match provider.chat(&req) {
        Ok(resp) => {
            let answer = resp.text.unwrap_or_default().trim().to_lowercase();
            if answer.starts_with("yes") {
                AssertionOutcome::Pass
            } else if answer.starts_with("no") {
                AssertionOutcome::Fail
            } else {
                tracing::warn!(%answer, "judge gave no yes/no answer");
                AssertionOutcome::Skipped
            }
        }
        Err(e) => {
            tracing::warn!(error = %e, "judge call failed");
            AssertionOutcome::Skipped
        }
    }
}

/// Grades one trajectory against the task's groundtruth.
pub fn grade_task(
    traj: &Trajectory,
    task: &TaskSpec,
    bundle: &DomainBundle,
    judge: &Judge<'_>,
) -> Result<GradeResult, EnvError> {
    let expected_db = bundle.apply_groundtruth(task)?;
    let mut failure_reasons = Vec::new();
    match &traj.termination {
        Termination::UserStop => {}
        Termination::Truncated => failure_reasons.push("conversation truncated at the turn limit".to_string()),
        Termination::Aborted { reason } => failure_reasons.push(format!("conversation aborted: {reason}")),
    }

    let db_match = traj.final_db == expected_db;
    if !db_match {
        failure_reasons.push("final database differs from the expected state".into());
    }

    let calls: Vec<_> = traj.tool_calls().collect();
    let mut cursor = 0;
    let mut missed_actions = Vec::new();
    for pattern in &task.groundtruth.actions {
        let is_write = bundle
            .tool(&pattern.tool_name)
            .is_some_and(|t| t.effect == EffectKind::Write);
        if !is_write {
            continue;
        }
        match calls[cursor..].iter().position(|c| pattern.matches(c)) {
            Some(offset) => cursor += offset + 1,
            None => missed_actions.push(pattern.signature()),
        }
    }
    let actions_match = missed_actions.is_empty();
    for m in &missed_actions {
        failure_reasons.push(format!("expected action not performed: {m}"));
    }

    let said = normalize_for_match(&traj.assistant_text());
    let communicate_match: Vec<(String, bool)> = task
        .groundtruth
        .communicate_info
        .iter()
        .map(|info| (info.clone(), said.contains(&normalize_for_match(info))))
        .collect();
    for (info, found) in &communicate_match {
        if !found {
            failure_reasons.push(format!("expected information not communicated: {info}"));
        }
    }

    let predicates = bundle.predicates.get(&task.task_id);
    let assertion_results: Vec<(String, AssertionOutcome)> = task
        .groundtruth
        .nl_assertions
        .iter()
        .enumerate()
        .map(|(i, assertion)| {
            let outcome = match judge {
                Judge::Off => AssertionOutcome::Skipped,
                Judge::Predicates => match predicates.and_then(|p| p.get(i)) {
                    Some(p) if eval_predicate(p, traj) => AssertionOutcome::Pass,
                    Some(_) => AssertionOutcome::Fail,
                    None => AssertionOutcome::Skipped,
                },
                Judge::Model { provider, model } => judge_with_model(*provider, model, traj, assertion),
            };
            (assertion.clone(), outcome)
        })
        .collect();
    for (a, outcome) in &assertion_results {
        if *outcome == AssertionOutcome::Fail {
            failure_reasons.push(format!("assertion failed: {a}"));
        }
    }

    let reward = traj.is_complete()
        && db_match
        && actions_match
        && communicate_match.iter().all(|(_, f)| *f)
        && assertion_results.iter().all(|(_, o)| *o != AssertionOutcome::Fail);
    Ok(GradeResult {
        reward,
        db_match,
        actions_match,
        missed_actions,
        communicate_match,
        assertion_results,
        failure_reasons,
    })
}

/// Unbiased pass^k: per task `C(c,k)/C(n,k)`, averaged over tasks.
pub fn pass_hat_k(outcomes: &[Vec<bool>], k: usize) -> Result<f64, MetricError> {
    if outcomes.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut total = 0.0;
    for trials in outcomes {
        let n = trials.len();
        if k < 1 || k > n {
            return Err(MetricError::KOutOfRange { k, n });
        }
        let c = trials.iter().filter(|b| **b).count();
        total += ratio_of_binomials(c, n, k);
    }
    Ok(total / outcomes.len() as f64)
}

fn ratio_of_binomials(c: usize, n: usize, k: usize) -> f64 {
    if c < k {
        return 0.0;
    }
    (0..k).map(|i| (c - i) as f64 / (n - i) as f64).product()
}

/// Fraction of the baseline-to-oracle distance a method covers.
pub fn gap_closure(method: f64, baseline: f64, oracle: f64) -> Result<f64, MetricError> {
    if oracle <= baseline {
        return Err(MetricError::UndefinedGap { baseline, oracle });
    }
    Ok((method - baseline) / (oracle - baseline))
}

/// Parents and controls shuffled by `seed`, each parent followed by its
/// sisters in t-1, t-2, t-3 order.
pub fn stream_order(bundle: &DomainBundle, seed: u64) -> Vec<String> {
    let mut roots: Vec<&TaskSpec> = bundle.tasks.iter().filter(|t| t.parent_task_id.is_none()).collect();
    roots.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    roots.shuffle(&mut rng);
    let mut order = Vec::with_capacity(bundle.tasks.len());
    for root in roots {
        order.push(root.task_id.clone());
        let mut sisters: Vec<&TaskSpec> = bundle
            .tasks
            .iter()
            .filter(|t| t.parent_task_id.as_deref() == Some(root.task_id.as_str()))
            .collect();
        sisters.sort_by_key(|t| {
            (
                t.sister_task_type.unwrap_or(SisterTaskType::ComplexVariant),
                t.task_id.clone(),
            )
        });
        order.extend(sisters.into_iter().map(|t| t.task_id.clone()));
    }
    order
}

/// Everything persisted about one task attempt besides the trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub position: usize,
    pub stage: String,
    #[serde(default)]
    pub gap_id: Option<String>,
    pub trajectory_hash: String,
    pub termination: String,
    pub grade: GradeResult,
    pub feedback: Feedback,
    /// Bank step the agent ran with; `None` without memory.
    #[serde(default)]
    pub bank_step: Option<u32>,
    /// Bank step produced by the review of this task.
    #[serde(default)]
    pub bank_step_after: Option<u32>,
}

/// A task already finished in a previous process.
pub struct CompletedTask {
    pub record: TaskRecord,
    pub bank_after: Option<BankSnapshot>,
}

/// Receives run artifacts as they are produced.
pub trait StreamSink: Sync {
    fn initial_bank(&self) -> Option<BankSnapshot> {
        None
    }
    fn put_initial_bank(&self, _init: &InitOutcome) -> Result<(), String> {
        Ok(())
    }
    fn put_trajectory(&self, _seed: u64, _trial: u32, _traj: &Trajectory) -> Result<(), String> {
        Ok(())
    }
    fn put_review(
        &self,
        _seed: u64,
        _trial: u32,
        _review: &ReviewRecord,
        _snapshot: &BankSnapshot,
    ) -> Result<(), String> {
        Ok(())
    }
    /// Written last for a task; its presence marks the task complete.
    fn put_task_record(&self, _seed: u64, _trial: u32, _record: &TaskRecord) -> Result<(), String> {
        Ok(())
    }
    fn completed(&self, _seed: u64, _trial: u32, _task_id: &str) -> Option<CompletedTask> {
        None
    }
    /// A trajectory persisted for a task whose record was never written.
    fn trajectory(&self, _seed: u64, _trial: u32, _task_id: &str) -> Option<Trajectory> {
        None
    }
}

/// A sink that keeps nothing.
pub struct NullSink;

impl StreamSink for NullSink {}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub stage: String,
    #[serde(default)]
    pub gap_id: Option<String>,
    pub reward: bool,
    pub termination: String,
    pub trajectory_hash: String,
    #[serde(default)]
    pub bank_step: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub seed: u64,
    pub trial: u32,
    pub order: Vec<String>,
    pub results: Vec<TaskResult>,
    /// Bank steps persisted for this stream, in order.
    pub bank_steps: Vec<u32>,
    pub review_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRow {
    pub split: String,
    /// Number of (seed, task) units in the split.
    pub units: usize,
    /// pass^k for k = 1..=trials.
    pub pass_k: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub domain: String,
    pub method: String,
    pub config: RunConfig,
    pub streams: Vec<StreamSummary>,
    pub splits: Vec<SplitRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: String,
    /// Mean reward per trial index, trial 1 first.
    pub per_trial: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn run_one_stream(
    bundle: &DomainBundle,
    cfg: &RunConfig,
    providers: &Providers,
    initial: Option<&BankSnapshot>,
    sink: &dyn StreamSink,
    human: Option<&dyn HumanFeedback>,
    seed: u64,
    trial: u32,
) -> Result<StreamSummary, EvalError> {
    let order = stream_order(bundle, seed);
    let mut memory: Box<dyn MemoryStrategy> = match (cfg.memory_strategy, initial) {
        (MemoryStrategyKind::Policybank, Some(bank)) => {
            Box::new(PolicyBankMemory::new(bank.clone(), cfg.retrieval_mode))
        }
        _ => Box::new(NoMemory),
    };
    let mut current_step = initial
        .filter(|_| cfg.memory_strategy == MemoryStrategyKind::Policybank)
        .map(|b| b.step);
    let judge = match cfg.judge {
        JudgeMode::Off => Judge::Off,
        JudgeMode::Predicates => Judge::Predicates,
        JudgeMode::Model => Judge::Model {
            provider: providers.judge.as_deref().ok_or(ConfigError::NoJudge)?,
            model: &cfg.models.judge,
        },
    };
    let sink_err = EvalError::Sink;
    let mut summary = StreamSummary {
        seed,
        trial,
        order: order.clone(),
        results: Vec::new(),
        bank_steps: initial.map(|b| vec![b.step]).unwrap_or_default(),
        review_failures: 0,
    };

    for (position, task_id) in order.iter().enumerate() {
        let task = bundle
            .task(task_id)
            .ok_or_else(|| EvalError::UnknownTask(task_id.clone()))?;
        if let Some(done) = sink.completed(seed, trial, task_id) {
            if let Some(bank) = done.bank_after {
                summary.bank_steps.push(bank.step);
                current_step = Some(bank.step);
                memory = Box::new(PolicyBankMemory::new(bank, cfg.retrieval_mode));
            }
            summary.results.push(result_of(&done.record));
            continue;
        }
        let bank_step = current_step;
        let traj = match sink.trajectory(seed, trial, task_id) {
            Some(t) => t,
            None => {
                let t = run_task(task, bundle, memory.as_ref(), cfg, providers, seed, trial);
                sink.put_trajectory(seed, trial, &t).map_err(sink_err)?;
                t
            }
        };
        let grade = grade_task(&traj, task, bundle, &judge)?;
        let feedback = collect_feedback(
            task,
            bundle,
            &grade,
            cfg.feedback_regime,
            human.map(|h| (h, seed, trial)),
        )
        .map_err(|e| EvalError::Feedback(e.to_string()))?;
        let mut bank_step_after = None;
        if traj.is_complete() {
            let input = UpdateInput {
                bundle,
                trajectory: &traj,
                feedback: &feedback,
                reviewer: providers.reviewer.as_ref(),
                model: &cfg.models.reviewer,
                retry_budget: cfg.review_retry_budget,
            };
            if let Some(update) = memory.post_task_update(&input) {
                if update.review.error.is_some() {
                    summary.review_failures += 1;
                }
                sink.put_review(seed, trial, &update.review, &update.snapshot)
                    .map_err(sink_err)?;
                summary.bank_steps.push(update.snapshot.step);
                bank_step_after = Some(update.snapshot.step);
                current_step = bank_step_after;
            }
        }
        let record = TaskRecord {
            task_id: task_id.clone(),
            position,
            stage: task.stage().to_string(),
            gap_id: task.policy_gap.clone(),
            trajectory_hash: traj.hash().map_err(|e| EvalError::Sink(e.to_string()))?,
            termination: traj.termination.label().to_string(),
            grade,
            feedback,
            bank_step,
            bank_step_after,
        };
        sink.put_task_record(seed, trial, &record).map_err(sink_err)?;
        summary.results.push(result_of(&record));
    }
    Ok(summary)
}

fn result_of(record: &TaskRecord) -> TaskResult {
    TaskResult {
        task_id: record.task_id.clone(),
        stage: record.stage.clone(),
        gap_id: record.gap_id.clone(),
        reward: record.grade.reward,
        termination: record.termination.clone(),
        trajectory_hash: record.trajectory_hash.clone(),
        bank_step: record.bank_step,
    }
}

/// Produces `M_0` for a policybank run, reusing a persisted one.
pub fn prepare_initial_bank(
    bundle: &DomainBundle,
    cfg: &RunConfig,
    providers: &Providers,
    sink: &dyn StreamSink,
) -> Result<Option<BankSnapshot>, EvalError> {
    if cfg.memory_strategy != MemoryStrategyKind::Policybank {
        return Ok(None);
    }
    if let Some(bank) = sink.initial_bank() {
        return Ok(Some(bank));
    }
    let init = init_bank(
        bundle,
        providers.reviewer.as_ref(),
        &cfg.models.reviewer,
        cfg.review_retry_budget,
    )
    .map_err(|f| EvalError::Init(f.error.to_string()))?;
    sink.put_initial_bank(&init).map_err(EvalError::Sink)?;
    Ok(Some(init.snapshot))
}

/// Runs every (seed, trial) stream and assembles the report. Streams run in
/// parallel unless human feedback is involved.
pub fn run_stream(
    bundle: &DomainBundle,
    cfg: &RunConfig,
    providers: &Providers,
    sink: &dyn StreamSink,
    human: Option<&dyn HumanFeedback>,
) -> Result<RunReport, EvalError> {
    cfg.validate(human.is_some())?;
    let initial = prepare_initial_bank(bundle, cfg, providers, sink)?;
    let jobs: Vec<(u64, u32)> = cfg
        .seeds
        .iter()
        .flat_map(|s| (1..=cfg.trials).map(move |t| (*s, t)))
        .collect();
    let run = |&(seed, trial): &(u64, u32)| {
        run_one_stream(bundle, cfg, providers, initial.as_ref(), sink, human, seed, trial)
    };
    let streams: Vec<StreamSummary> = if human.is_some() {
        jobs.iter().map(run).collect::<Result<_, _>>()?
    } else {
        jobs.par_iter().map(run).collect::<Result<_, _>>()?
    };
    Ok(assemble_report(bundle, cfg, streams))
}

/// (seed, task) -> (trial, reward) pairs.
type UnitOutcomes = BTreeMap<(u64, String), Vec<(u32, bool)>>;

/// Pure fold of stream summaries into a report.
pub fn assemble_report(bundle: &DomainBundle, cfg: &RunConfig, streams: Vec<StreamSummary>) -> RunReport {
    // (split, seed, task) -> rewards in trial order
    let mut units: BTreeMap<String, UnitOutcomes> = BTreeMap::new();
    for s in &streams {
        for r in &s.results {
            let mut splits = vec!["all".to_string(), r.stage.clone()];
            splits.push(
                if r.stage.starts_with("t-") {
                    "sister"
                } else {
                    "original"
                }
                .to_string(),
            );
            if let Some(g) = &r.gap_id {
                splits.push(format!("gap {g}"));
            }
            for split in splits {
                units
                    .entry(split)
                    .or_default()
                    .entry((s.seed, r.task_id.clone()))
                    .or_default()
                    .push((s.trial, r.reward));
            }
        }
    }
    let preferred = ["all", "original", "sister", "parent", "t-1", "t-2", "t-3", "control"];
    let mut names: Vec<String> = preferred
        .iter()
        .map(|s| s.to_string())
        .filter(|s| units.contains_key(s))
        .collect();
    names.extend(units.keys().filter(|k| !preferred.contains(&k.as_str())).cloned());
    let splits = names
        .into_iter()
        .map(|name| {
            let per_unit: Vec<Vec<bool>> = units[&name]
                .values()
                .map(|v| {
                    let mut v = v.clone();
                    v.sort_by_key(|(t, _)| *t);
                    v.into_iter().map(|(_, r)| r).collect()
                })
                .collect();
            let n = per_unit.iter().map(Vec::len).min().unwrap_or(0);
            let pass_k = (1..=n).map(|k| pass_hat_k(&per_unit, k).unwrap_or(0.0)).collect();
            SplitRow {
                split: name,
                units: per_unit.len(),
                pass_k,
            }
        })
        .collect();
    RunReport {
        domain: bundle.name.clone(),
        method: cfg.method_label(),
        config: cfg.clone(),
        streams,
        splits,
    }
}

/// Mean reward per family stage per trial index.
pub fn report_by_family_stage(report: &RunReport) -> Vec<StageRow> {
    let mut acc: BTreeMap<&str, BTreeMap<u32, (usize, usize)>> = BTreeMap::new();
    for s in &report.streams {
        for r in &s.results {
            if !matches!(r.stage.as_str(), "parent" | "t-1" | "t-2" | "t-3") {
                continue;
            }
            let cell = acc.entry(r.stage.as_str()).or_default().entry(s.trial).or_default();
            cell.0 += usize::from(r.reward);
            cell.1 += 1;
        }
    }
    ["parent", "t-1", "t-2", "t-3"]
        .iter()
        .filter_map(|stage| {
            acc.get(stage).map(|by_trial| StageRow {
                stage: stage.to_string(),
                per_trial: by_trial.values().map(|(p, n)| *p as f64 / *n as f64).collect(),
            })
        })
        .collect()
}

/// Text table: method × split rows, pass^k columns.
pub fn render_report_table(reports: &[&RunReport]) -> String {
    let k_max = reports
        .iter()
        .flat_map(|r| r.splits.iter().map(|s| s.pass_k.len()))
        .max()
        .unwrap_or(0);
    let mut out = String::new();
    let _ = write!(out, "{:<36} {:<10} {:>5}", "method", "split", "units");
    for k in 1..=k_max {
        let _ = write!(out, " {:>8}", format!("pass^{k}"));
    }
    out.push('\n');
    for report in reports {
        for row in &report.splits {
            let _ = write!(out, "{:<36} {:<10} {:>5}", report.method, row.split, row.units);
            for v in &row.pass_k {
                let _ = write!(out, " {v:>8.3}");
            }
            out.push('\n');
        }
    }
    out
}

/// Text table of [`report_by_family_stage`].
pub fn render_stage_table(rows: &[StageRow]) -> String {
    let mut out = String::new();
    let trials = rows.iter().map(|r| r.per_trial.len()).max().unwrap_or(0);
    let header: Vec<String> = (1..=trials).map(|t| format!("{:>7}", format!("trial{t}"))).collect();
    let _ = writeln!(out, "{:<8}{}", "stage", header.concat());
    for row in rows {
        let cells: Vec<String> = row.per_trial.iter().map(|v| format!("{v:>7.3}")).collect();
        let _ = writeln!(out, "{:<8}{}", row.stage, cells.concat());
    }
    out
}
