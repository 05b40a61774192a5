//! Shared domain types: databases, tool calls, conversation turns,
//! trajectories, feedback and benchmark tasks.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::canonical::{self, CanonicalError};
use crate::value::Value;

/// One database row, keyed by field name.
pub type Record = BTreeMap<String, Value>;

/// Environment state: table name → record id → record.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Database {
    pub tables: BTreeMap<String, BTreeMap<String, Record>>,
}

impl Database {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn table(&self, name: &str) -> Option<&BTreeMap<String, Record>> {
        self.tables.get(name)
    }

    pub fn record(&self, table: &str, id: &str) -> Option<&Record> {
        self.tables.get(table)?.get(id)
    }

    pub fn insert(&mut self, table: &str, id: impl Into<String>, record: Record) {
        self.tables
            .entry(table.to_string())
            .or_default()
            .insert(id.into(), record);
    }
}

/// A concrete tool invocation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCallAction {
    pub tool_name: String,
    #[serde(default)]
    pub arguments: BTreeMap<String, Value>,
    #[serde(default)]
    pub call_id: String,
}

impl ToolCallAction {
    pub fn new(tool_name: impl Into<String>, arguments: BTreeMap<String, Value>) -> Self {
        Self {
            tool_name: tool_name.into(),
            arguments,
            call_id: String::new(),
        }
    }

    /// `name(key=value, ...)` with keys in sorted order.
    pub fn signature(&self) -> String {
        render_call(&self.tool_name, &self.arguments)
    }
}

pub(crate) fn render_call(name: &str, args: &BTreeMap<String, Value>) -> String {
    let rendered: Vec<String> = args.iter().map(|(k, v)| format!("{k}={}", v.render())).collect();
    format!("{name}({})", rendered.join(", "))
}

/// Runtime-assigned call identifier for the `n`-th call of a trajectory.
pub fn call_id(ordinal: usize) -> String {
    format!("c{ordinal}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
    ToolResult,
    System,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub index: usize,
    pub role: Role,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub tool_calls: Vec<ToolCallAction>,
    #[serde(default)]
    pub for_call_id: Option<String>,
}

impl Turn {
    pub fn user(index: usize, text: impl Into<String>) -> Self {
        Self {
            index,
            role: Role::User,
            text: Some(text.into()),
            tool_calls: Vec::new(),
            for_call_id: None,
        }
    }

    pub fn assistant(index: usize, text: Option<String>, tool_calls: Vec<ToolCallAction>) -> Self {
        Self {
            index,
            role: Role::Assistant,
            text,
            tool_calls,
            for_call_id: None,
        }
    }

    pub fn tool_result(index: usize, call_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            index,
            role: Role::ToolResult,
            text: Some(text.into()),
            tool_calls: Vec::new(),
            for_call_id: Some(call_id.into()),
        }
    }
}

/// How a conversation ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Termination {
    UserStop,
    Truncated,
    Aborted { reason: String },
}

impl Termination {
    pub fn label(&self) -> &'static str {
        match self {
            Termination::UserStop => "user_stop",
            Termination::Truncated => "truncated",
            Termination::Aborted { .. } => "aborted",
        }
    }
}

/// A retrieval event: the assistant turn that called the retrieval tool and
/// the entry ids it received.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Retrieval {
    pub turn_index: usize,
    pub selected_ids: Vec<u32>,
}

/// The action trace of one task attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub trial: u32,
    pub seed: u64,
    pub turns: Vec<Turn>,
    pub final_db: Database,
    #[serde(default)]
    pub retrievals: Vec<Retrieval>,
    pub termination: Termination,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TrajectoryError {
    #[error("trajectory has no user turn")]
    NoUserTurn,
    #[error("turn at position {position} has index {index}")]
    BadIndex { position: usize, index: usize },
    #[error("tool result at turn {index} references unknown call {call_id:?}")]
    DanglingResult { index: usize, call_id: String },
    #[error("call id {0:?} used more than once")]
    DuplicateCallId(String),
}

#[derive(Debug, thiserror::Error)]
pub enum EncodingError {
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
    #[error("malformed trajectory encoding: {0}")]
    Decode(String),
}

/// Header line of a persisted trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TrajectoryHeader {
    task_id: String,
    trial: u32,
    seed: u64,
    termination: Termination,
    retrievals: Vec<Retrieval>,
    final_db: Database,
}

impl Trajectory {
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        if !self.turns.iter().any(|t| t.role == Role::User) {
            return Err(TrajectoryError::NoUserTurn);
        }
        let mut seen_calls = HashSet::new();
        for (position, turn) in self.turns.iter().enumerate() {
            if turn.index != position {
                return Err(TrajectoryError::BadIndex {
                    position,
                    index: turn.index,
                });
            }
            for call in &turn.tool_calls {
                if !seen_calls.insert(call.call_id.clone()) {
                    return Err(TrajectoryError::DuplicateCallId(call.call_id.clone()));
                }
            }
            if turn.role == Role::ToolResult {
                let id = turn.for_call_id.clone().unwrap_or_default();
                if !seen_calls.contains(&id) {
                    return Err(TrajectoryError::DanglingResult {
                        index: turn.index,
                        call_id: id,
                    });
                }
            }
        }
        Ok(())
    }

    /// Every tool call made by the assistant, in order.
    pub fn tool_calls(&self) -> impl Iterator<Item = &ToolCallAction> {
        self.turns
            .iter()
            .filter(|t| t.role == Role::Assistant)
            .flat_map(|t| t.tool_calls.iter())
    }

    /// Concatenated assistant text.
    pub fn assistant_text(&self) -> String {
        self.turns
            .iter()
            .filter(|t| t.role == Role::Assistant)
            .filter_map(|t| t.text.as_deref())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn is_complete(&self) -> bool {
        self.termination == Termination::UserStop
    }

    pub fn canonical_encoding(&self) -> Result<Vec<u8>, EncodingError> {
        Ok(canonical::to_canonical_bytes(self)?)
    }

    pub fn decode(bytes: &[u8]) -> Result<Trajectory, EncodingError> {
        serde_json::from_slice(bytes).map_err(|e| EncodingError::Decode(e.to_string()))
    }

    /// SHA-256 over the canonical encoding, hex encoded.
    pub fn hash(&self) -> Result<String, EncodingError> {
        Ok(canonical::sha256_hex(&self.canonical_encoding()?))
    }

    /// JSON Lines form: one header line, then one line per turn.
    pub fn to_jsonl(&self) -> Result<String, EncodingError> {
        let header = TrajectoryHeader {
            task_id: self.task_id.clone(),
            trial: self.trial,
            seed: self.seed,
            termination: self.termination.clone(),
            retrievals: self.retrievals.clone(),
            final_db: self.final_db.clone(),
        };
        let mut out = canonical::to_canonical_string(&header)?;
        out.push('\n');
        for turn in &self.turns {
            out.push_str(&canonical::to_canonical_string(turn)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Trajectory, EncodingError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header_line = lines
            .next()
            .ok_or_else(|| EncodingError::Decode("empty trajectory file".into()))?;
        let header: TrajectoryHeader =
            serde_json::from_str(header_line).map_err(|e| EncodingError::Decode(format!("header: {e}")))?;
        let turns = lines
            .enumerate()
            .map(|(i, line)| {
                serde_json::from_str::<Turn>(line)
                    .map_err(|e| EncodingError::Decode(format!("turn line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Trajectory {
            task_id: header.task_id,
            trial: header.trial,
            seed: header.seed,
            turns,
            final_db: header.final_db,
            retrievals: header.retrievals,
            termination: header.termination,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSource {
    Groundtruth,
    Human,
    Scripted,
}

/// Which feedback form the developer supplies after each task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackRegime {
    RewardOnly,
    RewardExplanation,
    Oracle,
    Human,
}

impl fmt::Display for FeedbackRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeedbackRegime::RewardOnly => "reward_only",
            FeedbackRegime::RewardExplanation => "reward_explanation",
            FeedbackRegime::Oracle => "oracle",
            FeedbackRegime::Human => "human",
        })
    }
}

/// Corrective signal delivered after a task attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feedback {
    pub reward: bool,
    #[serde(default)]
    pub explanation: Option<String>,
    #[serde(default)]
    pub oracle_clarification: Option<String>,
    pub source: FeedbackSource,
}

impl Feedback {
    /// Checks the shape constraints a regime places on the signal.
    pub fn conforms_to(&self, regime: FeedbackRegime) -> bool {
        match regime {
            FeedbackRegime::RewardOnly => self.explanation.is_none() && self.oracle_clarification.is_none(),
            FeedbackRegime::Oracle => self.oracle_clarification.is_some(),
            FeedbackRegime::RewardExplanation | FeedbackRegime::Human => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SisterTaskType {
    SimplifiedEdit,
    DifferentInstance,
    ComplexVariant,
}

impl SisterTaskType {
    pub const ALL: [SisterTaskType; 3] = [
        SisterTaskType::SimplifiedEdit,
        SisterTaskType::DifferentInstance,
        SisterTaskType::ComplexVariant,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SisterTaskType::SimplifiedEdit => "simplified_edit",
            SisterTaskType::DifferentInstance => "different_instance",
            SisterTaskType::ComplexVariant => "complex_variant",
        }
    }

    /// Short stage label: t-1, t-2, t-3.
    pub fn stage_label(&self) -> &'static str {
        match self {
            SisterTaskType::SimplifiedEdit => "t-1",
            SisterTaskType::DifferentInstance => "t-2",
            SisterTaskType::ComplexVariant => "t-3",
        }
    }
}

/// An expected tool call. Argument values equal to `"*"` match anything.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionPattern {
    pub tool_name: String,
    #[serde(default)]
    pub arguments: BTreeMap<String, Value>,
}

impl ActionPattern {
    pub fn new(tool_name: impl Into<String>, arguments: BTreeMap<String, Value>) -> Self {
        Self {
            tool_name: tool_name.into(),
            arguments,
        }
    }

    pub fn matches(&self, call: &ToolCallAction) -> bool {
        call.tool_name == self.tool_name
            && self.arguments.iter().all(|(k, expected)| {
                expected.is_wildcard() || call.arguments.get(k).is_some_and(|actual| expected.numeric_eq(actual))
            })
    }

    /// The concrete call this pattern describes, with wildcard arguments
    /// left out.
    pub fn concrete_call(&self) -> ToolCallAction {
        let args = self
            .arguments
            .iter()
            .filter(|(_, v)| !v.is_wildcard())
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ToolCallAction::new(self.tool_name.clone(), args)
    }

    pub fn signature(&self) -> String {
        render_call(&self.tool_name, &self.arguments)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(default)]
    pub actions: Vec<ActionPattern>,
    #[serde(default)]
    pub communicate_info: Vec<String>,
    #[serde(default)]
    pub nl_assertions: Vec<String>,
}

/// A benchmark task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    #[serde(default)]
    pub parent_task_id: Option<String>,
    #[serde(default)]
    pub sister_task_type: Option<SisterTaskType>,
    #[serde(default)]
    pub policy_gap: Option<String>,
    pub user_scenario: String,
    pub simulator_instructions: String,
    pub groundtruth: GroundTruth,
    pub domain: String,
}

impl TaskSpec {
    pub fn is_sister(&self) -> bool {
        self.sister_task_type.is_some()
    }

    /// Family stage label: `parent`, `t-1`, `t-2`, `t-3` or `control`.
    pub fn stage(&self) -> &'static str {
        match (self.sister_task_type, &self.policy_gap) {
            (Some(kind), _) => kind.stage_label(),
            (None, Some(_)) => "parent",
            (None, None) => "control",
        }
    }
}

/// Something that knows which tool names exist.
pub trait ToolRegistry {
    fn contains_tool(&self, name: &str) -> bool;
}

impl ToolRegistry for BTreeSet<String> {
    fn contains_tool(&self, name: &str) -> bool {
        self.contains(name)
    }
}

impl ToolRegistry for HashSet<String> {
    fn contains_tool(&self, name: &str) -> bool {
        self.contains(name)
    }
}

impl ToolRegistry for [&str] {
    fn contains_tool(&self, name: &str) -> bool {
        self.contains(&name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskViolation {
    EmptyTaskId,
    InvalidTaskId(String),
    OrphanSister,
    MissingSisterType,
    SisterWithoutGap,
    EmptyScenario,
    EmptyInstructions,
    UnknownTool(String),
    EmptyCommunicateInfo(usize),
}

impl fmt::Display for TaskViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskViolation::EmptyTaskId => write!(f, "empty task id"),
            TaskViolation::InvalidTaskId(id) => write!(f, "invalid task id {id:?}"),
            TaskViolation::OrphanSister => write!(f, "orphan sister"),
            TaskViolation::MissingSisterType => write!(f, "parent_task_id without sister_task_type"),
            TaskViolation::SisterWithoutGap => write!(f, "sister task without policy_gap"),
            TaskViolation::EmptyScenario => write!(f, "empty user scenario"),
            TaskViolation::EmptyInstructions => write!(f, "empty simulator instructions"),
            TaskViolation::UnknownTool(name) => write!(f, "unknown tool {name:?}"),
            TaskViolation::EmptyCommunicateInfo(i) => write!(f, "communicate_info[{i}] is empty"),
        }
    }
}

/// Checks a task against the structural rules and the tool registry. Never
/// fails; an empty list means the task is well formed.
pub fn validate_task_spec<R: ToolRegistry + ?Sized>(spec: &TaskSpec, registry: &R) -> Vec<TaskViolation> {
    let mut out = Vec::new();
    if spec.task_id.is_empty() {
        out.push(TaskViolation::EmptyTaskId);
    } else if !spec
        .task_id
        .chars()
        .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
    {
        out.push(TaskViolation::InvalidTaskId(spec.task_id.clone()));
    }
    match (&spec.sister_task_type, &spec.parent_task_id) {
        (Some(_), None) => out.push(TaskViolation::OrphanSister),
        (None, Some(_)) => out.push(TaskViolation::MissingSisterType),
        _ => {}
    }
    if spec.sister_task_type.is_some() && spec.policy_gap.is_none() {
        out.push(TaskViolation::SisterWithoutGap);
    }
    if spec.user_scenario.trim().is_empty() {
        out.push(TaskViolation::EmptyScenario);
    }
    if spec.simulator_instructions.trim().is_empty() {
        out.push(TaskViolation::EmptyInstructions);
    }
    for action in &spec.groundtruth.actions {
        if !registry.contains_tool(&action.tool_name) {
            out.push(TaskViolation::UnknownTool(action.tool_name.clone()));
        }
    }
    for (i, info) in spec.groundtruth.communicate_info.iter().enumerate() {
        if info.trim().is_empty() {
            out.push(TaskViolation::EmptyCommunicateInfo(i));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(pairs: &[(&str, Value)]) -> BTreeMap<String, Value> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    fn parent_task() -> TaskSpec {
        TaskSpec {
            task_id: "2".into(),
            parent_task_id: None,
            sister_task_type: None,
            policy_gap: Some("A-1".into()),
            user_scenario: "User complains about a delayed flight.".into(),
            simulator_instructions: "Complain about the delay.".into(),
            groundtruth: GroundTruth {
                actions: vec![ActionPattern::new(
                    "send_certificate",
                    args(&[("user_id", "U1".into()), ("amount", Value::Int(50))]),
                )],
                communicate_info: vec![],
                nl_assertions: vec![],
            },
            domain: "mini_airline".into(),
        }
    }

    fn registry() -> BTreeSet<String> {
        ["send_certificate", "get_user_details"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    #[test]
    fn well_formed_parent_is_ok() {
        assert!(validate_task_spec(&parent_task(), &registry()).is_empty());
    }

    #[test]
    fn sister_without_parent_is_orphan() {
        let mut t = parent_task();
        t.task_id = "2-1".into();
        t.sister_task_type = Some(SisterTaskType::SimplifiedEdit);
        let v = validate_task_spec(&t, &registry());
        assert_eq!(v, vec![TaskViolation::OrphanSister]);
        assert_eq!(v[0].to_string(), "orphan sister");
    }

    #[test]
    fn typo_tool_is_unknown() {
        let mut t = parent_task();
        t.groundtruth.actions[0].tool_name = "send_certifcate".into();
        let v = validate_task_spec(&t, &registry());
        assert_eq!(v, vec![TaskViolation::UnknownTool("send_certifcate".into())]);
    }

    #[test]
    fn pattern_wildcards_and_numeric_match() {
        let pattern = ActionPattern::new(
            "cancel_reservation",
            args(&[("reservation_id", "R4".into()), ("reason", "*".into())]),
        );
        let mut call = ToolCallAction::new(
            "cancel_reservation",
            args(&[("reservation_id", "R4".into()), ("reason", "work".into())]),
        );
        assert!(pattern.matches(&call));
        call.arguments.remove("reason");
        assert!(pattern.matches(&call));
        call.arguments.insert("reservation_id".into(), "R3".into());
        assert!(!pattern.matches(&call));
        assert_eq!(pattern.concrete_call().arguments.len(), 1);
    }

    fn sample_trajectory() -> Trajectory {
        let mut db = Database::new();
        db.insert("users", "U1", args(&[("name", "Mia".into())]));
        let mut call = ToolCallAction::new("get_user_details", args(&[("user_id", "U1".into())]));
        call.call_id = call_id(1);
        Trajectory {
            task_id: "2".into(),
            trial: 1,
            seed: 0,
            turns: vec![
                Turn::user(0, "hello"),
                Turn::assistant(1, None, vec![call]),
                Turn::tool_result(2, "c1", "{}"),
                Turn::assistant(3, Some("done".into()), vec![]),
                Turn::user(4, "###STOP###"),
            ],
            final_db: db,
            retrievals: vec![],
            termination: Termination::UserStop,
        }
    }

    #[test]
    fn trajectory_validation() {
        let t = sample_trajectory();
        t.validate().unwrap();
        let mut bad = t.clone();
        bad.turns[2].for_call_id = Some("c9".into());
        assert!(matches!(bad.validate(), Err(TrajectoryError::DanglingResult { .. })));
        let mut bad = t.clone();
        bad.turns[3].index = 7;
        assert!(matches!(bad.validate(), Err(TrajectoryError::BadIndex { .. })));
    }

    #[test]
    fn encoding_is_deterministic_and_round_trips() {
        let t = sample_trajectory();
        let a = t.canonical_encoding().unwrap();
        assert_eq!(a, t.canonical_encoding().unwrap());
        let back = Trajectory::decode(&a).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.canonical_encoding().unwrap(), a);
    }

    #[test]
    fn argument_insertion_order_does_not_matter() {
        let mut a = sample_trajectory();
        let mut b = sample_trajectory();
        let mut first = BTreeMap::new();
        first.insert("x".to_string(), Value::Int(1));
        first.insert("a".to_string(), Value::Int(2));
        let mut second = BTreeMap::new();
        second.insert("a".to_string(), Value::Int(2));
        second.insert("x".to_string(), Value::Int(1));
        a.turns[1].tool_calls[0].arguments = first;
        b.turns[1].tool_calls[0].arguments = second;
        assert_eq!(a.canonical_encoding().unwrap(), b.canonical_encoding().unwrap());
    }

    #[test]
    fn whitespace_change_changes_hash() {
        let a = sample_trajectory();
        let mut b = a.clone();
        b.turns[0].text = Some("hello ".into());
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(
            a.hash().unwrap(),
            Trajectory::decode(&a.canonical_encoding().unwrap())
                .unwrap()
                .hash()
                .unwrap()
        );
    }

    #[test]
    fn jsonl_round_trip() {
        let t = sample_trajectory();
        let text = t.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 1 + t.turns.len());
        assert!(text.lines().next().unwrap().contains("\"task_id\":\"2\""));
        assert_eq!(Trajectory::from_jsonl(&text).unwrap(), t);
    }

    #[test]
    fn feedback_regime_shapes() {
        let plain = Feedback {
            reward: true,
            explanation: None,
            oracle_clarification: None,
            source: FeedbackSource::Groundtruth,
        };
        assert!(plain.conforms_to(FeedbackRegime::RewardOnly));
        assert!(!plain.conforms_to(FeedbackRegime::Oracle));
        let oracle = Feedback {
            oracle_clarification: Some("x".into()),
            ..plain.clone()
        };
        assert!(oracle.conforms_to(FeedbackRegime::Oracle));
        assert!(!oracle.conforms_to(FeedbackRegime::RewardOnly));
    }
}
