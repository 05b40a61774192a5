//! The online conversation loop: task agent, user simulator, tool execution
//! and agent-triggered policy retrieval.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::bank::{get_entries, list_headers, BankSnapshot};
use crate::environment::{DomainBundle, EnvError};
use crate::evaluation::GradeResult;
use crate::model::{
    call_id, Feedback, FeedbackRegime, FeedbackSource, Retrieval, Role, TaskSpec, Termination, ToolCallAction,
    Trajectory, Turn,
};
use crate::provider::{ChatMessage, ChatProvider, ChatRequest, ModelIds, ProviderError, ToolSchema};
use crate::reviewer::{review_step, ReviewAttempt, ReviewContext, ReviewOutcome, ReviewVerdict, ValidatedOps};
use crate::value::Value;

pub const STOP_SENTINEL: &str = "###STOP###";
pub const RETRIEVE_POLICY: &str = "retrieve_policy";
pub const SELECTOR_WINDOW: usize = 6;
pub const SELECTOR_HEADERS_MARK: &str = "POLICY ENTRY HEADERS:";
pub const SELECTOR_CONTEXT_MARK: &str = "RECENT CONVERSATION:";
pub const SIMULATOR_START: &str = "(The agent is waiting for your first message.)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryStrategyKind {
    Policybank,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    Tool,
    FullContext,
}

/// How natural-language assertions are judged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMode {
    /// The bundle's predicate table.
    Predicates,
    /// One yes/no question per assertion to the judge model.
    Model,
    /// Assertions are recorded as skipped.
    Off,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunConfig {
    pub memory_strategy: MemoryStrategyKind,
    pub retrieval_mode: RetrievalMode,
    pub feedback_regime: FeedbackRegime,
    pub trials: u32,
    pub seeds: Vec<u64>,
    pub max_turns: usize,
    pub models: ModelIds,
    pub judge: JudgeMode,
    pub review_retry_budget: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            memory_strategy: MemoryStrategyKind::Policybank,
            retrieval_mode: RetrievalMode::Tool,
            feedback_regime: FeedbackRegime::Oracle,
            trials: 4,
            seeds: (0..5).collect(),
            max_turns: 40,
            models: ModelIds::default(),
            judge: JudgeMode::Predicates,
            review_retry_budget: 1,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("trials must be at least 1")]
    NoTrials,
    #[error("max_turns must be at least 2, got {0}")]
    MaxTurns(usize),
    #[error("at least one seed is required")]
    NoSeeds,
    #[error("duplicate seed {0}")]
    DuplicateSeed(u64),
    #[error("the human feedback regime needs the interactive service")]
    HumanNeedsService,
    #[error("judge mode model needs a judge provider")]
    NoJudge,
}

impl RunConfig {
    pub fn validate(&self, interactive: bool) -> Result<(), ConfigError> {
        if self.trials < 1 {
            return Err(ConfigError::NoTrials);
        }
        if self.max_turns < 2 {
            return Err(ConfigError::MaxTurns(self.max_turns));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::NoSeeds);
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.seeds {
            if !seen.insert(*s) {
                return Err(ConfigError::DuplicateSeed(*s));
            }
        }
        if self.feedback_regime == FeedbackRegime::Human && !interactive {
            return Err(ConfigError::HumanNeedsService);
        }
        Ok(())
    }

    /// Short method label used in report tables.
    pub fn method_label(&self) -> String {
        match (self.memory_strategy, self.retrieval_mode) {
            (MemoryStrategyKind::None, _) => "no-memory".into(),
            (MemoryStrategyKind::Policybank, RetrievalMode::Tool) => format!("policybank ({})", self.feedback_regime),
            (MemoryStrategyKind::Policybank, RetrievalMode::FullContext) => {
                format!("policybank full-context ({})", self.feedback_regime)
            }
        }
    }
}

/// One provider per role.
#[derive(Clone)]
pub struct Providers {
    pub agent: Arc<dyn ChatProvider>,
    pub simulator: Arc<dyn ChatProvider>,
    pub selector: Arc<dyn ChatProvider>,
    pub reviewer: Arc<dyn ChatProvider>,
    pub judge: Option<Arc<dyn ChatProvider>>,
}

impl Providers {
    /// The same provider for every role, including the judge.
    pub fn uniform(p: Arc<dyn ChatProvider>) -> Self {
        Providers {
            agent: p.clone(),
            simulator: p.clone(),
            selector: p.clone(),
            reviewer: p.clone(),
            judge: Some(p),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error("simulator instructions are empty for task {0}")]
    EmptyInstructions(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("feedback: {0}")]
    Feedback(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Inputs to a strategy's post-task update.
pub struct UpdateInput<'a> {
    pub bundle: &'a DomainBundle,
    pub trajectory: &'a Trajectory,
    pub feedback: &'a Feedback,
    pub reviewer: &'a dyn ChatProvider,
    pub model: &'a str,
    pub retry_budget: u32,
}

/// Persisted record of one review.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub step: u32,
    pub task_id: String,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub verdict: Option<ReviewVerdict>,
    #[serde(default)]
    pub ops: Option<ValidatedOps>,
    pub attempts: Vec<ReviewAttempt>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateRecord {
    pub snapshot: BankSnapshot,
    pub review: ReviewRecord,
}

/// The seam between the conversation loop and a memory method.
pub trait MemoryStrategy: Send {
    /// The agent's system prompt for a domain policy.
    fn augment_system_prompt(&self, policy_text: &str) -> String;
    /// The bank served through `retrieve_policy` this turn; `None` means the
    /// tool is not offered.
    fn retrieval_bank(&self) -> Option<&BankSnapshot>;
    /// Called once after each completed task.
    fn post_task_update(&mut self, input: &UpdateInput<'_>) -> Option<UpdateRecord>;
}

/// No memory: the written policy alone.
pub struct NoMemory;

impl MemoryStrategy for NoMemory {
    fn augment_system_prompt(&self, policy_text: &str) -> String {
        policy_text.to_string()
    }

    fn retrieval_bank(&self) -> Option<&BankSnapshot> {
        None
    }

    fn post_task_update(&mut self, _input: &UpdateInput<'_>) -> Option<UpdateRecord> {
        None
    }
}

/// The evolving policy bank, served by retrieval or in full.
pub struct PolicyBankMemory {
    pub bank: BankSnapshot,
    pub mode: RetrievalMode,
}

impl PolicyBankMemory {
    pub fn new(bank: BankSnapshot, mode: RetrievalMode) -> Self {
        PolicyBankMemory { bank, mode }
    }
}

/// All entries in id order, one block each.
pub fn render_entries(bank: &BankSnapshot) -> String {
    let (found, _) = get_entries(bank, &bank.ids());
    render_blocks(&found)
}

fn render_blocks(blocks: &[(String, String)]) -> String {
    blocks
        .iter()
        .map(|(header, text)| format!("{header}\n{text}"))
        .collect::<Vec<_>>()
        .join("\n\n")
}

impl MemoryStrategy for PolicyBankMemory {
    fn augment_system_prompt(&self, policy_text: &str) -> String {
        match self.mode {
            RetrievalMode::Tool => {
                format!(
                    "{}\n\n{}",
                    policy_text.trim_end(),
                    crate::reviewer::RETRIEVAL_INSTRUCTIONS.trim_end()
                )
            }
            RetrievalMode::FullContext => {
                let body = if self.bank.entries.is_empty() {
                    "policy bank is empty".to_string()
                } else {
                    render_entries(&self.bank)
                };
                format!("{}\n\n## Policy Memory Bank\n{body}", policy_text.trim_end())
            }
        }
    }

    fn retrieval_bank(&self) -> Option<&BankSnapshot> {
        (self.mode == RetrievalMode::Tool).then_some(&self.bank)
    }

    fn post_task_update(&mut self, input: &UpdateInput<'_>) -> Option<UpdateRecord> {
        let step = self.bank.step + 1;
        let schema = input.bundle.schema_text();
        let overview = input.bundle.tool_overview_text();
        let ctx = ReviewContext::for_bundle(
            input.bundle,
            &schema,
            &overview,
            &self.bank,
            input.trajectory,
            input.feedback,
        );
        let provenance = format!("review of task {}", input.trajectory.task_id);
        let (snapshot, review) = match review_step(
            &ctx,
            input.bundle,
            input.reviewer,
            input.model,
            input.retry_budget,
            step,
            &provenance,
        ) {
            Ok(ReviewOutcome {
                verdict,
                ops,
                snapshot,
                attempts,
            }) => (
                snapshot,
                ReviewRecord {
                    step,
                    task_id: input.trajectory.task_id.clone(),
                    error: None,
                    verdict: Some(verdict),
                    ops: Some(ops),
                    attempts,
                },
            ),
            Err(failure) => {
                tracing::warn!(task = %input.trajectory.task_id, error = %failure.error, "review failed");
                (
                    failure.fallback_snapshot(&self.bank, step),
                    ReviewRecord {
                        step,
                        task_id: input.trajectory.task_id.clone(),
                        error: Some(failure.error.to_string()),
                        verdict: None,
                        ops: None,
                        attempts: failure.attempts,
                    },
                )
            }
        };
        self.bank = snapshot.clone();
        Some(UpdateRecord { snapshot, review })
    }
}

/// Schema of the retrieval tool.
pub fn retrieve_policy_schema() -> ToolSchema {
    ToolSchema {
        name: RETRIEVE_POLICY.into(),
        description: "Retrieve policy guidelines relevant to the current request from the policy bank.".into(),
        parameters: serde_json::json!({
            "type": "object",
            "properties": {
                "mode": {
                    "type": "string",
                    "enum": ["llm", "all"],
                    "description": "\"llm\" selects the entries relevant to the conversation; \"all\" returns every entry."
                }
            },
            "required": ["mode"],
        }),
    }
}

/// Tools offered to the agent for one turn.
pub fn offered_tools(bundle: &DomainBundle, memory: &dyn MemoryStrategy) -> Vec<ToolSchema> {
    let mut tools = bundle.tool_schemas();
    if memory.retrieval_bank().is_some() {
        tools.push(retrieve_policy_schema());
    }
    tools
}

/// The agent's view of the conversation so far.
pub fn agent_messages(system: &str, turns: &[Turn]) -> Vec<ChatMessage> {
    let mut messages = vec![ChatMessage::system(system)];
    for turn in turns {
        let text = turn.text.clone();
        messages.push(match turn.role {
            Role::User => ChatMessage::user(text.unwrap_or_default()),
            Role::System => ChatMessage::system(text.unwrap_or_default()),
            Role::Assistant => ChatMessage::assistant(text, turn.tool_calls.clone()),
            Role::ToolResult => {
                ChatMessage::tool(turn.for_call_id.clone().unwrap_or_default(), text.unwrap_or_default())
            }
        });
    }
    messages
}

pub fn simulator_system_prompt(instructions: &str) -> String {
    format!(
        "You are playing a customer who is contacting a customer service agent.\n\
         Stay in character and follow these instructions:\n\n{instructions}\n\n\
         Write only the customer's next message. Reveal information only when the agent asks for it. \
         When the customer's goal is met or cannot be met, reply with exactly {STOP_SENTINEL}."
    )
}

/// Asks the simulator for the next user message. The simulator sees the
/// conversation with roles flipped: agent text arrives as user messages.
pub fn user_turn(
    simulator: &dyn ChatProvider,
    model: &str,
    task: &TaskSpec,
    turns: &[Turn],
) -> Result<String, RuntimeError> {
    if task.simulator_instructions.trim().is_empty() {
        return Err(RuntimeError::EmptyInstructions(task.task_id.clone()));
    }
    let mut messages = vec![
        ChatMessage::system(simulator_system_prompt(&task.simulator_instructions)),
        ChatMessage::user(SIMULATOR_START),
    ];
    for turn in turns {
        match (turn.role, turn.text.as_deref()) {
            (Role::User, Some(text)) => messages.push(ChatMessage::assistant(Some(text.to_string()), Vec::new())),
            (Role::Assistant, Some(text)) if !text.trim().is_empty() => messages.push(ChatMessage::user(text)),
            _ => {}
        }
    }
    let resp = simulator.chat(&ChatRequest::new(model, messages))?;
    let text = resp.text.unwrap_or_default().trim().to_string();
    if text.is_empty() {
        return Err(ProviderError::Malformed("simulator returned an empty message".into()).into());
    }
    Ok(text)
}

fn selector_prompt(bank: &BankSnapshot, turns: &[Turn]) -> ChatRequest {
    let window = &turns[turns.len().saturating_sub(SELECTOR_WINDOW)..];
    let context: Vec<String> = window
        .iter()
        .filter_map(|t| {
            let text = t.text.as_deref().unwrap_or("");
            match t.role {
                Role::User => Some(format!("USER: {text}")),
                Role::Assistant if !t.tool_calls.is_empty() => Some(format!(
                    "ASSISTANT CALLS: {}",
                    t.tool_calls
                        .iter()
                        .map(|c| c.signature())
                        .collect::<Vec<_>>()
                        .join("; ")
                )),
                Role::Assistant => Some(format!("ASSISTANT: {text}")),
                Role::ToolResult => Some(format!("TOOL RESULT: {text}")),
                Role::System => None,
            }
        })
        .collect();
    let system = "You select policy bank entries for a customer service agent. \
                  Given the entry headers and the recent conversation, choose the entries relevant to the current request. \
                  Respond with ONLY a JSON object of the form {\"selected_ids\": [<integer>, ...]}.";
    let user = format!(
        "{SELECTOR_HEADERS_MARK}\n{}\n\n{SELECTOR_CONTEXT_MARK}\n{}",
        list_headers(bank).join("\n"),
        context.join("\n")
    );
    ChatRequest::new("", vec![ChatMessage::system(system), ChatMessage::user(user)])
}

/// Parses `{"selected_ids": [...]}` or a bare id list.
pub fn parse_selection(text: &str) -> Option<Vec<u32>> {
    let trimmed = text
        .trim()
        .trim_start_matches("```json")
        .trim_start_matches("```")
        .trim_end_matches("```");
    let doc: Json = serde_json::from_str(trimmed.trim()).ok()?;
    let list = match &doc {
        Json::Array(items) => items,
        Json::Object(map) => map.get("selected_ids")?.as_array()?,
        _ => return None,
    };
    list.iter()
        .map(|v| v.as_u64().and_then(|n| u32::try_from(n).ok()))
        .collect()
}

/// Serves one `retrieve_policy` call. Returns the tool result text and the
/// ids delivered.
pub fn handle_retrieve_policy(
    call: &ToolCallAction,
    bank: &BankSnapshot,
    turns: &[Turn],
    selector: &dyn ChatProvider,
    model: &str,
) -> (String, Vec<u32>) {
    if bank.entries.is_empty() {
        return ("policy bank is empty".into(), Vec::new());
    }
    let mode = call.arguments.get("mode").and_then(Value::as_str).unwrap_or("llm");
    let ids = match mode {
        "all" => bank.ids(),
        "llm" => {
            let mut req = selector_prompt(bank, turns);
            req.model = model.to_string();
            match selector.chat(&req) {
                Ok(resp) => match parse_selection(resp.text.as_deref().unwrap_or("")) {
                    Some(ids) => ids.into_iter().filter(|id| bank.get(*id).is_some()).collect(),
                    None => {
                        tracing::warn!(raw = ?resp.text, "unparsable selection; returning all entries");
                        bank.ids()
                    }
                },
                Err(e) => {
                    tracing::warn!(error = %e, "selector failed; returning all entries");
                    bank.ids()
                }
            }
        }
        other => {
            return (
                format!("Error: mode must be \"llm\" or \"all\", got {other:?}"),
                Vec::new(),
            )
        }
    };
    let (found, _) = get_entries(bank, &ids);
    if found.is_empty() {
        return ("no policy entries matched this request".into(), Vec::new());
    }
    let mut delivered = ids;
    delivered.sort_unstable();
    delivered.dedup();
    (render_blocks(&found), delivered)
}

/// Loop bookkeeping for [`should_terminate`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoopState {
    pub turns_used: usize,
    pub user_stopped: bool,
    pub abort: Option<String>,
}

/// Whether the conversation ends now, and how.
pub fn should_terminate(state: &LoopState, max_turns: usize) -> Option<Termination> {
    if let Some(reason) = &state.abort {
        return Some(Termination::Aborted { reason: reason.clone() });
    }
    if state.user_stopped {
        return Some(Termination::UserStop);
    }
    if state.turns_used >= max_turns {
        return Some(Termination::Truncated);
    }
    None
}

/// Runs one task attempt to completion. Provider failures end the
/// trajectory as aborted rather than returning an error.
#[allow(clippy::too_many_arguments)]
pub fn run_task(
    task: &TaskSpec,
    bundle: &DomainBundle,
    memory: &dyn MemoryStrategy,
    cfg: &RunConfig,
    providers: &Providers,
    seed: u64,
    trial: u32,
) -> Trajectory {
    let system = memory.augment_system_prompt(&bundle.policy_text);
    let mut turns: Vec<Turn> = Vec::new();
    let mut retrievals = Vec::new();
    let mut db = bundle.initial_db.clone();
    let mut state = LoopState::default();
    let mut calls_made = 0usize;

    let termination = 'conversation: loop {
        match user_turn(providers.simulator.as_ref(), &cfg.models.simulator, task, &turns) {
            Ok(text) if text.contains(STOP_SENTINEL) => state.user_stopped = true,
            Ok(text) => {
                turns.push(Turn::user(turns.len(), text));
                state.turns_used += 1;
            }
            Err(e) => state.abort = Some(format!("simulator: {e}")),
        }
        if let Some(t) = should_terminate(&state, cfg.max_turns) {
            break t;
        }
        loop {
            let tools = offered_tools(bundle, memory);
            let req = ChatRequest::new(&cfg.models.agent, agent_messages(&system, &turns)).with_tools(tools);
            let resp = match providers.agent.chat(&req) {
                Ok(r) => r,
                Err(e) => {
                    state.abort = Some(format!("agent: {e}"));
                    break 'conversation should_terminate(&state, cfg.max_turns).expect("abort set");
                }
            };
            state.turns_used += 1;
            let calls: Vec<ToolCallAction> = resp
                .tool_calls
                .into_iter()
                .map(|mut c| {
                    calls_made += 1;
                    c.call_id = call_id(calls_made);
                    c
                })
                .collect();
            let assistant_index = turns.len();
            turns.push(Turn::assistant(assistant_index, resp.text, calls.clone()));
            if calls.is_empty() {
                break;
            }
            for call in &calls {
                let result = if call.tool_name == RETRIEVE_POLICY {
                    match memory.retrieval_bank() {
                        Some(bank) => {
                            let (text, ids) = handle_retrieve_policy(
                                call,
                                bank,
                                &turns,
                                providers.selector.as_ref(),
                                &cfg.models.selector,
                            );
                            retrievals.push(Retrieval {
                                turn_index: assistant_index,
                                selected_ids: ids,
                            });
                            text
                        }
                        None => format!("Error: tool {RETRIEVE_POLICY:?} is not available"),
                    }
                } else {
                    match bundle.execute(&db, call) {
                        Ok((next, text)) => {
                            db = next;
                            text
                        }
                        Err(e) => format!("Error: {e}"),
                    }
                };
                turns.push(Turn::tool_result(turns.len(), call.call_id.clone(), result));
            }
            if let Some(t) = should_terminate(&state, cfg.max_turns) {
                break 'conversation t;
            }
        }
        if let Some(t) = should_terminate(&state, cfg.max_turns) {
            break t;
        }
    };

    Trajectory {
        task_id: task.task_id.clone(),
        trial,
        seed,
        turns,
        final_db: db,
        retrievals,
        termination,
    }
}

/// Pending human feedback for one graded task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackRequest {
    pub seed: u64,
    pub trial: u32,
    pub task_id: String,
    pub suggested_reward: bool,
    pub grade: GradeResult,
}

/// A blocking source of human feedback.
pub trait HumanFeedback: Sync {
    fn request(&self, request: FeedbackRequest) -> Result<Feedback, String>;
}

/// The `reward_explanation` text built from a grade.
pub fn explanation_from_grade(grade: &GradeResult) -> String {
    if grade.reward {
        return "The task was completed as expected.".into();
    }
    let or_none = |items: Vec<String>| {
        if items.is_empty() {
            "none".to_string()
        } else {
            items.join(", ")
        }
    };
    let missed_info: Vec<String> = grade
        .communicate_match
        .iter()
        .filter(|(_, found)| !found)
        .map(|(s, _)| s.clone())
        .collect();
    let assertions: Vec<String> = grade
        .assertion_results
        .iter()
        .map(|(a, outcome)| format!("{a} [{}]", outcome.as_str()))
        .collect();
    format!(
        "Expected actions not performed: {}; expected information not communicated: {}; assertions: {}",
        or_none(grade.missed_actions.clone()),
        or_none(missed_info),
        or_none(assertions)
    )
}

/// Builds the feedback signal for a graded task under a regime.
pub fn collect_feedback(
    task: &TaskSpec,
    bundle: &DomainBundle,
    grade: &GradeResult,
    regime: FeedbackRegime,
    human: Option<(&dyn HumanFeedback, u64, u32)>,
) -> Result<Feedback, RuntimeError> {
    let reward = grade.reward;
    match regime {
        FeedbackRegime::RewardOnly => Ok(Feedback {
            reward,
            explanation: None,
            oracle_clarification: None,
            source: FeedbackSource::Groundtruth,
        }),
        FeedbackRegime::RewardExplanation => Ok(Feedback {
            reward,
            explanation: Some(explanation_from_grade(grade)),
            oracle_clarification: None,
            source: FeedbackSource::Groundtruth,
        }),
        FeedbackRegime::Oracle => {
            let clarification = match bundle.gap_for_task(task) {
                Some(gap) => gap.clarification.clone(),
                None => "No policy clarification applies to this task; the written policy is authoritative.".into(),
            };
            Ok(Feedback {
                reward,
                explanation: None,
                oracle_clarification: Some(clarification),
                source: FeedbackSource::Groundtruth,
            })
        }
        FeedbackRegime::Human => {
            let (channel, seed, trial) = human.ok_or(RuntimeError::Config(ConfigError::HumanNeedsService))?;
            let mut fb = channel
                .request(FeedbackRequest {
                    seed,
                    trial,
                    task_id: task.task_id.clone(),
                    suggested_reward: reward,
                    grade: grade.clone(),
                })
                .map_err(RuntimeError::Feedback)?;
            fb.source = FeedbackSource::Human;
            Ok(fb)
        }
    }
}
