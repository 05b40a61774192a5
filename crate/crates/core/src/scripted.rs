//! Deterministic stand-ins for every model role. A single backend answers
//! all roles and dispatches on the request's model id, so one recording
//! captures a whole run.

use std::collections::BTreeMap;

use serde_json::Value as Json;

use crate::environment::{DomainBundle, PolicyGapSpec};
use crate::model::{FeedbackRegime, TaskSpec, ToolCallAction};
use crate::provider::{ChatProvider, ChatRequest, ChatResponse, MessageRole, ModelIds, ProviderError};
use crate::runtime::{
    MemoryStrategyKind, RetrievalMode, RunConfig, RETRIEVE_POLICY, SELECTOR_CONTEXT_MARK, SELECTOR_HEADERS_MARK,
    STOP_SENTINEL,
};
use crate::value::Value;

const AGENT_PREFIX: &str = "scripted-agent-";
pub const SIMULATOR_MODEL: &str = "scripted-simulator";
pub const SELECTOR_MODEL: &str = "scripted-selector";
pub const REVIEWER_MODEL: &str = "scripted-reviewer";
pub const JUDGE_MODEL: &str = "scripted-judge";

/// How the scripted agent reads the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AgentMode {
    /// Follows the written clause: never performs the gap's blocked actions.
    Literal,
    /// Always behaves as the intended policy requires.
    Clarified,
    /// Follows the intended policy only once the gap's key condition is
    /// visible in its context.
    Adaptive,
}

impl AgentMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentMode::Literal => "literal",
            AgentMode::Clarified => "clarified",
            AgentMode::Adaptive => "adaptive",
        }
    }

    pub fn parse(s: &str) -> Option<AgentMode> {
        match s {
            "literal" => Some(AgentMode::Literal),
            "clarified" => Some(AgentMode::Clarified),
            "adaptive" => Some(AgentMode::Adaptive),
            _ => None,
        }
    }
}

/// Model ids that route every role to the scripted backend.
pub fn scripted_models(mode: AgentMode) -> ModelIds {
    ModelIds {
        agent: format!("{AGENT_PREFIX}{}", mode.as_str()),
        simulator: SIMULATOR_MODEL.into(),
        reviewer: REVIEWER_MODEL.into(),
        selector: SELECTOR_MODEL.into(),
        judge: JUDGE_MODEL.into(),
    }
}

/// Run configurations covered by the shipped replay fixtures, for every
/// built-in domain at the default seeds and trials.
pub fn fixture_matrix() -> Vec<RunConfig> {
    let base = |mode, memory| RunConfig {
        memory_strategy: memory,
        models: scripted_models(mode),
        ..RunConfig::default()
    };
    let mut out = vec![
        base(AgentMode::Literal, MemoryStrategyKind::None),
        base(AgentMode::Clarified, MemoryStrategyKind::None),
        base(AgentMode::Adaptive, MemoryStrategyKind::None),
    ];
    for regime in [
        FeedbackRegime::Oracle,
        FeedbackRegime::RewardExplanation,
        FeedbackRegime::RewardOnly,
    ] {
        out.push(RunConfig {
            feedback_regime: regime,
            ..base(AgentMode::Adaptive, MemoryStrategyKind::Policybank)
        });
    }
    out.push(RunConfig {
        retrieval_mode: RetrievalMode::FullContext,
        ..base(AgentMode::Adaptive, MemoryStrategyKind::Policybank)
    });
    out
}

pub struct ScriptedBackend {
    bundles: Vec<DomainBundle>,
}

fn script_err(msg: impl Into<String>) -> ProviderError {
    ProviderError::Script(msg.into())
}

impl ScriptedBackend {
    pub fn new(bundles: Vec<DomainBundle>) -> Self {
        ScriptedBackend { bundles }
    }

    fn task_by_scenario(&self, scenario: &str) -> Option<(&DomainBundle, &TaskSpec)> {
        self.bundles
            .iter()
            .flat_map(|b| b.tasks.iter().map(move |t| (b, t)))
            .find(|(_, t)| t.user_scenario == scenario)
    }

    fn agent(&self, req: &ChatRequest, mode: AgentMode) -> Result<ChatResponse, ProviderError> {
        let first_user = req
            .messages
            .iter()
            .find(|m| m.role == MessageRole::User)
            .and_then(|m| m.content.as_deref())
            .ok_or_else(|| script_err("agent request has no user message"))?;
        let (bundle, task) = self
            .task_by_scenario(first_user)
            .ok_or_else(|| script_err("agent cannot identify the task from the first user message"))?;
        let prior_calls: Vec<&ToolCallAction> = req
            .messages
            .iter()
            .filter(|m| m.role == MessageRole::Assistant)
            .flat_map(|m| m.tool_calls.iter())
            .collect();

        let retrieval_offered = req.tool_schemas.iter().any(|s| s.name == RETRIEVE_POLICY);
        let retrieved = prior_calls.iter().any(|c| c.tool_name == RETRIEVE_POLICY);
        if retrieval_offered && !retrieved {
            let args = BTreeMap::from([("mode".to_string(), Value::from("llm"))]);
            return Ok(ChatResponse::calls(
                None,
                vec![ToolCallAction::new(RETRIEVE_POLICY, args)],
            ));
        }

        let gap = bundle.gap_for_task(task);
        let clarified = match (mode, gap) {
            (_, None) | (AgentMode::Clarified, _) => true,
            (AgentMode::Literal, Some(_)) => false,
            (AgentMode::Adaptive, Some(g)) => {
                let key = g.key_condition.to_lowercase();
                req.messages
                    .iter()
                    .filter(|m| matches!(m.role, MessageRole::System | MessageRole::Tool))
                    .filter_map(|m| m.content.as_deref())
                    .any(|text| text.to_lowercase().contains(&key))
            }
        };
        let blocked = |tool: &str| !clarified && gap.is_some_and(|g| g.affected_tools.iter().any(|t| t == tool));
        let plan: Vec<ToolCallAction> = task
            .groundtruth
            .actions
            .iter()
            .filter(|a| !blocked(&a.tool_name))
            .map(|a| a.concrete_call())
            .collect();
        let progress = prior_calls.iter().filter(|c| c.tool_name != RETRIEVE_POLICY).count();
        if let Some(next) = plan.get(progress) {
            return Ok(ChatResponse::calls(None, vec![next.clone()]));
        }

        let mut skipped: Vec<&str> = task
            .groundtruth
            .actions
            .iter()
            .map(|a| a.tool_name.as_str())
            .filter(|t| blocked(t))
            .collect();
        skipped.dedup();
        let text = if skipped.is_empty() {
            let info = task.groundtruth.communicate_info.join(", ");
            if info.is_empty() {
                "Everything is taken care of. Is there anything else I can help with?".to_string()
            } else {
                format!("Everything is taken care of. For your reference: {info}.")
            }
        } else {
            format!(
                "I'm sorry, but our policy does not allow me to use {} in this situation.",
                skipped.join(" or ")
            )
        };
        Ok(ChatResponse::text(text))
    }

    fn simulator(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let system = req.system_text();
        let task = self
            .bundles
            .iter()
            .flat_map(|b| b.tasks.iter())
            .filter(|t| system.contains(t.simulator_instructions.as_str()))
            .max_by_key(|t| t.simulator_instructions.len())
            .ok_or_else(|| script_err("simulator cannot identify the task from its instructions"))?;
        let spoken = req.messages.iter().any(|m| m.role == MessageRole::Assistant);
        Ok(ChatResponse::text(if spoken {
            STOP_SENTINEL.to_string()
        } else {
            task.user_scenario.clone()
        }))
    }

    fn selector(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let user = req.last_user_text().unwrap_or("");
        let headers_start = user
            .find(SELECTOR_HEADERS_MARK)
            .ok_or_else(|| script_err("selector prompt has no header list"))?;
        let context_start = user.find(SELECTOR_CONTEXT_MARK).unwrap_or(user.len());
        let headers = &user[headers_start + SELECTOR_HEADERS_MARK.len()..context_start.max(headers_start)];
        let context = user[context_start..].to_lowercase();
        let mut all = Vec::new();
        let mut picked = Vec::new();
        for line in headers.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let Some((id, rest)) = line.split_once(". ") else {
                continue;
            };
            let Ok(id) = id.parse::<u32>() else { continue };
            all.push(id);
            let keywords = rest.replace("::", " ").replace('_', " ");
            if keywords
                .split_whitespace()
                .filter(|w| w.len() >= 4)
                .any(|w| context.contains(&w.to_lowercase()))
            {
                picked.push(id);
            }
        }
        let ids = if picked.is_empty() { all } else { picked };
        Ok(ChatResponse::text(
            serde_json::json!({ "selected_ids": ids }).to_string(),
        ))
    }

    fn reviewer(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let user = req.last_user_text().unwrap_or("");
        let bundle = self
            .bundles
            .iter()
            .find(|b| user.contains(b.policy_text.trim()))
            .ok_or_else(|| script_err("reviewer cannot identify the domain policy"))?;
        let body = match between(user, "<trajectory>", "</trajectory>") {
            None => init_verdict(bundle),
            Some(trajectory) => {
                let bank = between(user, "<policy_bank>", "</policy_bank>")
                    .and_then(|b| serde_json::from_str::<Json>(b.trim()).ok())
                    .unwrap_or(Json::Array(Vec::new()));
                review_verdict(bundle, trajectory, &bank)
            }
        };
        Ok(ChatResponse::text(
            serde_json::to_string_pretty(&body).expect("verdict serializes"),
        ))
    }
}

fn between<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = text.find(open)? + open.len();
    let end = text[start..].find(close)? + start;
    Some(&text[start..end])
}

/// Capability name the scripted reviewer uses for a tool.
pub fn capability_for(tool: &str) -> String {
    match tool {
        "send_certificate" => "delay_compensation".into(),
        "update_reservation_flights" => "modify_flights".into(),
        "cancel_reservation" => "cancel_with_insurance".into(),
        "exchange_delivered_order_items" => "exchange_items".into(),
        other => format!("{other}_rules"),
    }
}

fn init_verdict(bundle: &DomainBundle) -> Json {
    let mut entries = Vec::new();
    let mut tools_seen = Vec::new();
    for gap in &bundle.gaps {
        let Some(tool) = gap.affected_tools.first() else {
            continue;
        };
        if tools_seen.contains(tool) {
            continue;
        }
        tools_seen.push(tool.clone());
        entries.push(serde_json::json!({
            "id": entries.len() + 1,
            "tool": tool,
            "capability": capability_for(tool),
            "spec_nl": format!(
                "TRIGGER: The user's request may involve {tool}.\n\
                 PRECONDITIONS: Look up the relevant user and records before acting.\n\
                 ELIGIBILITY: {}\n\
                 ACTION: Proceed only when the written condition holds; otherwise explain the restriction.",
                gap.flawed_clause
            ),
        }));
    }
    serde_json::json!({
        "overall_success": true,
        "decision_explanation": "Initial bank restating the written policy for the tools with conditional rules.",
        "entries": entries,
    })
}

fn line_value<'a>(text: &'a str, label: &str) -> Option<&'a str> {
    text.lines().find_map(|l| l.strip_prefix(label)).map(str::trim)
}

fn existing_id(bank: &Json, tool: &str, capability: &str) -> Option<u64> {
    bank.as_array()?.iter().find_map(|e| {
        (e.get("tool")?.as_str()? == tool && e.get("capability")?.as_str()? == capability)
            .then(|| e.get("id")?.as_u64())
            .flatten()
    })
}

fn next_id(bank: &Json) -> u64 {
    bank.as_array()
        .map(|a| a.iter().filter_map(|e| e.get("id")?.as_u64()).max().unwrap_or(0))
        .unwrap_or(0)
        + 1
}

fn gap_entry(bank: &Json, gap: &PolicyGapSpec, eligibility: &str, insight: &str) -> Option<Json> {
    let tool = gap.affected_tools.first()?;
    let capability = capability_for(tool);
    let id = existing_id(bank, tool, &capability).unwrap_or_else(|| next_id(bank));
    Some(serde_json::json!({
        "id": id,
        "tool": tool,
        "capability": capability,
        "spec_nl": format!(
            "TRIGGER: The user's request may involve {tool}.\n\
             PRECONDITIONS: Look up the relevant user and records before acting.\n\
             ELIGIBILITY: {eligibility}\n\
             ACTION: Perform {tool} when these conditions hold and confirm the outcome to the user.\n\
             KEY INSIGHT: {insight}"
        ),
    }))
}

fn review_verdict(bundle: &DomainBundle, trajectory: &str, bank: &Json) -> Json {
    let passed = line_value(trajectory, "RESULT:") == Some("PASS");
    if passed {
        return serde_json::json!({
            "overall_success": true,
            "decision_explanation": "The agent fulfilled the request within policy; the bank already covers it.",
            "entries": [],
        });
    }
    let mut entries = Vec::new();
    if let Some(clarification) = line_value(trajectory, "POLICY CLARIFICATION:") {
        if let Some(gap) = bundle.gaps.iter().find(|g| g.clarification.trim() == clarification) {
            entries.extend(gap_entry(
                bank,
                gap,
                &gap.clarification,
                &format!(
                    "The written clause is narrower than intended: \"{}\"",
                    gap.flawed_clause
                ),
            ));
        }
    } else if let Some(expected) = line_value(trajectory, "EXPECTED:") {
        for gap in &bundle.gaps {
            if gap.affected_tools.iter().any(|t| expected.contains(t.as_str())) {
                entries.extend(gap_entry(
                    bank,
                    gap,
                    &gap.flawed_clause,
                    &format!("Feedback shows this action was expected even though the written clause seemed to block it. {expected}"),
                ));
            }
        }
    }
    serde_json::json!({
        "overall_success": false,
        "decision_explanation": "The agent did not complete the request as the business intended.",
        "entries": entries,
    })
}

impl ChatProvider for ScriptedBackend {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        match req.model.as_str() {
            SIMULATOR_MODEL => self.simulator(req),
            SELECTOR_MODEL => self.selector(req),
            REVIEWER_MODEL => self.reviewer(req),
            JUDGE_MODEL => Ok(ChatResponse::text("yes")),
            other => match other.strip_prefix(AGENT_PREFIX).and_then(AgentMode::parse) {
                Some(mode) => self.agent(req, mode),
                None => Err(script_err(format!("no scripted role for model {other:?}"))),
            },
        }
    }
}
