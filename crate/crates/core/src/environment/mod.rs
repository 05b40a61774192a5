//! Executable benchmark domains: typed tools over a [`Database`], a policy
//! text with injected gaps, and task families.

mod bundle;
mod handler;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{validate_task_spec, Database, GroundTruth, Record, TaskSpec, ToolCallAction, ToolRegistry};
use crate::provider::ToolSchema;
use crate::value::Value;

pub use bundle::{builtin_domain, export_domain, load_domain, BUILTIN_DOMAINS};
pub use handler::{FieldSource, Guard, Handler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectKind {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamType {
    String,
    Integer,
    Decimal,
    Boolean,
    List,
    Map,
}

impl ParamType {
    fn json_type(self) -> &'static str {
        match self {
            ParamType::String => "string",
            ParamType::Integer => "integer",
            ParamType::Decimal => "number",
            ParamType::Boolean => "boolean",
            ParamType::List => "array",
            ParamType::Map => "object",
        }
    }

    /// Converts an argument to this type where the conversion is lossless.
    fn coerce(self, v: &Value) -> Option<Value> {
        match (self, v) {
            (ParamType::String, Value::Str(_))
            | (ParamType::Integer, Value::Int(_))
            | (ParamType::Boolean, Value::Bool(_))
            | (ParamType::List, Value::List(_))
            | (ParamType::Map, Value::Map(_))
            | (ParamType::Decimal, Value::Decimal(_)) => Some(v.clone()),
            (ParamType::String, Value::Int(i)) => Some(Value::Str(i.to_string())),
            (ParamType::Integer, Value::Decimal(d)) => d.to_integer().map(Value::Int),
            (ParamType::Integer, Value::Str(s)) => s.trim().parse().ok().map(Value::Int),
            (ParamType::Decimal, Value::Int(i)) => Some(Value::Int(*i)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: ParamType,
    #[serde(default = "yes")]
    pub required: bool,
    #[serde(default)]
    pub description: String,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolDef {
    pub name: String,
    pub description: String,
    pub effect: EffectKind,
    #[serde(default)]
    pub parameters: Vec<ParamSpec>,
    pub handler: Handler,
}

impl ToolDef {
    pub fn schema(&self) -> ToolSchema {
        let properties: serde_json::Map<String, serde_json::Value> = self
            .parameters
            .iter()
            .map(|p| {
                let mut prop = serde_json::json!({ "type": p.kind.json_type(), "description": p.description });
                if p.kind == ParamType::List {
                    prop["items"] = serde_json::json!({ "type": "string" });
                }
                (p.name.clone(), prop)
            })
            .collect();
        let required: Vec<&str> = self
            .parameters
            .iter()
            .filter(|p| p.required)
            .map(|p| p.name.as_str())
            .collect();
        ToolSchema {
            name: self.name.clone(),
            description: self.description.clone(),
            parameters: serde_json::json!({
                "type": "object",
                "properties": properties,
                "required": required,
            }),
        }
    }

    /// `name(param: type, ...)`, optional parameters marked with `?`.
    pub fn signature(&self) -> String {
        let params: Vec<String> = self
            .parameters
            .iter()
            .map(|p| {
                let opt = if p.required { "" } else { "?" };
                format!("{}{opt}: {}", p.name, p.kind.json_type())
            })
            .collect();
        format!("{}({})", self.name, params.join(", "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapDimension {
    AmbiguousScope,
    MissingBoundary,
    FalseDependency,
}

impl GapDimension {
    pub fn description(self) -> &'static str {
        match self {
            GapDimension::AmbiguousScope => "ambiguous scope",
            GapDimension::MissingBoundary => "missing boundary",
            GapDimension::FalseDependency => "false dependency",
        }
    }
}

/// A documented disagreement between the written policy and the intended one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyGapSpec {
    pub gap_id: String,
    pub dimension: GapDimension,
    /// Verbatim clause of the domain policy.
    pub flawed_clause: String,
    /// The gold policy update.
    pub clarification: String,
    pub affected_task_ids: Vec<String>,
    /// Short phrase of the clarification that the written policy lacks; its
    /// presence in an agent's context marks the gap as resolved.
    pub key_condition: String,
    /// Tools whose use the flawed clause wrongly blocks.
    pub affected_tools: Vec<String>,
}

/// Deterministic-mode stand-ins for natural-language assertions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "predicate", rename_all = "snake_case")]
pub enum Predicate {
    ToolCalled {
        tool: String,
    },
    ToolNotCalled {
        tool: String,
    },
    AssistantMentions {
        text: String,
    },
    /// Some call of `tool` has equal values for arguments `left` and `right`.
    ArgumentsEqual {
        tool: String,
        left: String,
        right: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainBundle {
    pub name: String,
    pub policy_text: String,
    pub initial_db: Database,
    pub tools: Vec<ToolDef>,
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub gaps: Vec<PolicyGapSpec>,
    /// Assertion predicates keyed by task id, aligned with `nl_assertions`.
    #[serde(default)]
    pub predicates: BTreeMap<String, Vec<Predicate>>,
}

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("tool {0:?} is not registered in this domain")]
    UnregisteredTool(String),
    #[error("unknown built-in domain {0:?}")]
    UnknownDomain(String),
    #[error("groundtruth of task {task_id} is invalid: {reason}")]
    GroundtruthInvalid { task_id: String, reason: String },
    #[error("missing bundle file {0}")]
    MissingFile(String),
    #[error("bundle file {file}: {reason}")]
    Schema { file: String, reason: String },
    #[error("invalid bundle:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
    #[error("bundle io: {0}")]
    Io(#[from] std::io::Error),
}

/// A domain-level failure reported to the agent as tool output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fault(pub String);

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Error: {}", self.0)
    }
}

impl ToolRegistry for DomainBundle {
    fn contains_tool(&self, name: &str) -> bool {
        self.tool(name).is_some()
    }
}

impl ToolRegistry for [ToolDef] {
    fn contains_tool(&self, name: &str) -> bool {
        self.iter().any(|t| t.name == name)
    }
}

impl DomainBundle {
    pub fn tool(&self, name: &str) -> Option<&ToolDef> {
        self.tools.iter().find(|t| t.name == name)
    }

    pub fn task(&self, task_id: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    pub fn gap(&self, gap_id: &str) -> Option<&PolicyGapSpec> {
        self.gaps.iter().find(|g| g.gap_id == gap_id)
    }

    pub fn gap_for_task(&self, task: &TaskSpec) -> Option<&PolicyGapSpec> {
        task.policy_gap.as_deref().and_then(|g| self.gap(g))
    }

    pub fn tool_names(&self) -> BTreeSet<String> {
        self.tools.iter().map(|t| t.name.clone()).collect()
    }

    pub fn tool_schemas(&self) -> Vec<ToolSchema> {
        self.tools.iter().map(ToolDef::schema).collect()
    }

    /// Tables and the union of their field names.
    pub fn schema_text(&self) -> String {
        let mut out = String::new();
        for (table, records) in &self.initial_db.tables {
            let fields: BTreeSet<&String> = records.values().flat_map(|r| r.keys()).collect();
            let fields: Vec<&str> = fields.into_iter().map(String::as_str).collect();
            out.push_str(&format!(
                "- {table} ({} records): {}\n",
                records.len(),
                fields.join(", ")
            ));
        }
        out.trim_end().to_string()
    }

    pub fn tool_overview_text(&self) -> String {
        self.tools
            .iter()
            .map(|t| {
                let effect = match t.effect {
                    EffectKind::Read => "read",
                    EffectKind::Write => "write",
                };
                format!("- {} [{effect}]: {}", t.signature(), t.description)
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Every structural problem of the bundle; empty when sound.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let mut names = BTreeSet::new();
        for tool in &self.tools {
            if !names.insert(tool.name.as_str()) {
                problems.push(format!("duplicate tool {:?}", tool.name));
            }
            if let Err(e) = tool.handler.check(tool) {
                problems.push(format!("tool {}: {e}", tool.name));
            }
        }
        let mut ids = BTreeSet::new();
        for task in &self.tasks {
            if !ids.insert(task.task_id.as_str()) {
                problems.push(format!("duplicate task id {:?}", task.task_id));
            }
            for v in validate_task_spec(task, self) {
                problems.push(format!("task {}: {v}", task.task_id));
            }
            if let Some(gap) = &task.policy_gap {
                if self.gap(gap).is_none() {
                    problems.push(format!("task {}: unknown policy gap {gap:?}", task.task_id));
                }
            }
            if let Some(parent) = &task.parent_task_id {
                if self.task(parent).is_none() {
                    problems.push(format!("task {}: unknown parent {parent:?}", task.task_id));
                }
            }
            if task.domain != self.name {
                problems.push(format!(
                    "task {}: domain {:?} differs from bundle",
                    task.task_id, task.domain
                ));
            }
            if let Some(preds) = self.predicates.get(&task.task_id) {
                if preds.len() > task.groundtruth.nl_assertions.len() {
                    problems.push(format!("task {}: more predicates than assertions", task.task_id));
                }
            }
        }
        for gap in &self.gaps {
            if !self.policy_text.contains(&gap.flawed_clause) {
                problems.push(format!("gap {}: flawed clause not in policy text", gap.gap_id));
            }
            if gap.clarification.trim().is_empty() {
                problems.push(format!("gap {}: empty clarification", gap.gap_id));
            }
            if !gap.clarification.contains(&gap.key_condition) || gap.key_condition.trim().is_empty() {
                problems.push(format!("gap {}: key condition not in clarification", gap.gap_id));
            }
            if self.policy_text.contains(&gap.key_condition) {
                problems.push(format!("gap {}: key condition already in policy text", gap.gap_id));
            }
            for tool in &gap.affected_tools {
                if self.tool(tool).is_none() {
                    problems.push(format!("gap {}: unknown affected tool {tool:?}", gap.gap_id));
                }
            }
        }
        problems
    }

    pub fn execute(&self, db: &Database, call: &ToolCallAction) -> Result<(Database, String), EnvError> {
        execute_tool(db, call, &self.tools)
    }

    /// Expected final state of a task.
    pub fn apply_groundtruth(&self, task: &TaskSpec) -> Result<Database, EnvError> {
        apply_groundtruth(&self.initial_db, &task.groundtruth, &self.tools).map_err(|reason| {
            EnvError::GroundtruthInvalid {
                task_id: task.task_id.clone(),
                reason,
            }
        })
    }
}

/// Runs one tool call. Domain faults come back as `Error: ...` text with the
/// state unchanged; only an unregistered tool is an `Err`.
pub fn execute_tool(db: &Database, call: &ToolCallAction, tools: &[ToolDef]) -> Result<(Database, String), EnvError> {
    let tool = tools
        .iter()
        .find(|t| t.name == call.tool_name)
        .ok_or_else(|| EnvError::UnregisteredTool(call.tool_name.clone()))?;
    match bind_arguments(tool, &call.arguments).and_then(|args| tool.handler.run(db, &args)) {
        Ok((next, result)) => {
            debug_assert!(tool.effect == EffectKind::Write || next == *db);
            Ok((next, result.to_json().to_string()))
        }
        Err(fault) => Ok((db.clone(), fault.to_string())),
    }
}

fn bind_arguments(tool: &ToolDef, args: &BTreeMap<String, Value>) -> Result<BTreeMap<String, Value>, Fault> {
    let mut bound = BTreeMap::new();
    for name in args.keys() {
        if !tool.parameters.iter().any(|p| &p.name == name) {
            return Err(Fault(format!("unexpected argument {name:?} for {}", tool.name)));
        }
    }
    for p in &tool.parameters {
        match args.get(&p.name) {
            Some(Value::Null) | None if p.required => {
                return Err(Fault(format!("missing required argument {:?}", p.name)))
            }
            Some(Value::Null) | None => {}
            Some(v) => {
                let coerced = p.kind.coerce(v).ok_or_else(|| {
                    Fault(format!(
                        "argument {:?} must be {}, got {}",
                        p.name,
                        p.kind.json_type(),
                        v.kind_name()
                    ))
                })?;
                bound.insert(p.name.clone(), coerced);
            }
        }
    }
    Ok(bound)
}

/// Executes the groundtruth's write actions in order on a copy of `db`.
/// Wildcard arguments are left out of the replayed call.
pub fn apply_groundtruth(db: &Database, gt: &GroundTruth, tools: &[ToolDef]) -> Result<Database, String> {
    let mut state = db.clone();
    for pattern in &gt.actions {
        let tool = tools
            .iter()
            .find(|t| t.name == pattern.tool_name)
            .ok_or_else(|| format!("unknown tool {:?}", pattern.tool_name))?;
        if tool.effect == EffectKind::Read {
            continue;
        }
        let call = pattern.concrete_call();
        let (next, result) = bind_arguments(tool, &call.arguments)
            .and_then(|args| tool.handler.run(&state, &args))
            .map_err(|f| format!("{} failed: {f}", pattern.signature()))?;
        let _ = result;
        state = next;
    }
    Ok(state)
}

pub(crate) fn record_value(record: &Record) -> Value {
    Value::Map(record.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ActionPattern;

    fn args(pairs: &[(&str, Value)]) -> BTreeMap<String, Value> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    fn airline() -> DomainBundle {
        builtin_domain("mini_airline").unwrap()
    }

    #[test]
    fn read_tool_leaves_state() {
        let b = airline();
        let call = ToolCallAction::new("get_user_details", args(&[("user_id", "U1".into())]));
        let (db, text) = b.execute(&b.initial_db, &call).unwrap();
        assert_eq!(db, b.initial_db);
        assert!(text.contains("gold"), "{text}");
    }

    #[test]
    fn certificate_is_recorded() {
        let b = airline();
        let call = ToolCallAction::new(
            "send_certificate",
            args(&[("user_id", "U1".into()), ("amount", Value::Int(50))]),
        );
        let (db, _) = b.execute(&b.initial_db, &call).unwrap();
        let certs = db.table("certificates").unwrap();
        assert_eq!(certs.len(), 1);
        let cert = certs.values().next().unwrap();
        assert_eq!(cert["user_id"], Value::from("U1"));
        assert_eq!(cert["amount"], Value::Int(50));
    }

    #[test]
    fn double_cancel_faults_without_change() {
        let b = airline();
        let call = ToolCallAction::new("cancel_reservation", args(&[("reservation_id", "R3".into())]));
        let (once, _) = b.execute(&b.initial_db, &call).unwrap();
        let (twice, text) = b.execute(&once, &call).unwrap();
        assert_eq!(once, twice);
        assert!(
            text.starts_with("Error:") && text.contains("already cancelled"),
            "{text}"
        );
    }

    #[test]
    fn faults_for_bad_arguments() {
        let b = airline();
        let missing = ToolCallAction::new("get_reservation_details", args(&[("reservation_id", "R9".into())]));
        let (db, text) = b.execute(&b.initial_db, &missing).unwrap();
        assert_eq!(db, b.initial_db);
        assert!(text.starts_with("Error:"));
        let wrong_type = ToolCallAction::new(
            "send_certificate",
            args(&[("user_id", "U1".into()), ("amount", Value::List(vec![]))]),
        );
        let (db, text) = b.execute(&b.initial_db, &wrong_type).unwrap();
        assert_eq!(db, b.initial_db);
        assert!(text.contains("must be integer"), "{text}");
        let unknown = ToolCallAction::new("teleport", BTreeMap::new());
        assert!(matches!(
            b.execute(&b.initial_db, &unknown),
            Err(EnvError::UnregisteredTool(_))
        ));
    }

    #[test]
    fn read_only_groundtruth_is_identity() {
        let b = airline();
        let gt = GroundTruth {
            actions: vec![ActionPattern::new(
                "get_user_details",
                args(&[("user_id", "U2".into())]),
            )],
            ..GroundTruth::default()
        };
        assert_eq!(apply_groundtruth(&b.initial_db, &gt, &b.tools).unwrap(), b.initial_db);
    }

    #[test]
    fn a1_groundtruth_amounts() {
        let b = airline();
        let certs = |id: &str| {
            let db = b.apply_groundtruth(b.task(id).unwrap()).unwrap();
            db.table("certificates")
                .unwrap()
                .values()
                .map(|r| r["amount"].clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(certs("2"), vec![Value::Int(50)]);
        assert_eq!(certs("2-2"), vec![Value::Int(150)]);
    }

    #[test]
    fn schemas_and_overview() {
        let b = airline();
        let schema = b.tool("send_certificate").unwrap().schema();
        assert_eq!(schema.parameters["required"], serde_json::json!(["user_id", "amount"]));
        assert!(b
            .tool_overview_text()
            .contains("send_certificate(user_id: string, amount: integer) [write]"));
        assert!(b.schema_text().contains("reservations"));
    }
}
