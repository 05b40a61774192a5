//! The offline policy reviewer: prompt rendering, verdict parsing, op
//! validation and the review step.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::bank::{apply_review_ops, to_snake_case, BankError, BankSnapshot, PolicyEntry, ReviewOp, SpecNl};
use crate::environment::DomainBundle;
use crate::model::{Feedback, Role, ToolRegistry, Trajectory};
use crate::provider::{ChatMessage, ChatProvider, ChatRequest, ProviderError};

pub const SYSTEM_TEMPLATE: &str = include_str!("../resources/prompts/policy_agent_system.txt");
pub const COMMON_INSTRUCTIONS: &str = include_str!("../resources/prompts/policy_agent_common.txt");
pub const INIT_TEMPLATE: &str = include_str!("../resources/prompts/bank_init.txt");
pub const REVIEW_TEMPLATE: &str = include_str!("../resources/prompts/bank_review.txt");
pub const RETRIEVAL_INSTRUCTIONS: &str = include_str!("../resources/prompts/policy_retrieval.txt");

const INIT_SPLICE: &str = "[Common instructions for Policy Agent (prompt 2) go here]";
const REVIEW_SPLICE: &str = "\"\"\"+SIMPLE_POLICYBANK_INSTRUCTIONS+\"\"\"";

/// Default taxonomy section appended to the reviewer's system prompt.
pub const GAP_TAXONOMY: &str = "\
# Policy Gap Dimensions
Classify a suspected gap along one of these dimensions before writing an insight:
- Ambiguous scope: a clause enumerates cases (reasons, items, situations) and reads as exhaustive although the intended rule covers a wider set.
- Missing boundary: a clause states a restriction without the exceptions the business actually honours.
- False dependency: a clause ties an entitlement to a condition that has no bearing on it, such as the user's intent to perform an unrelated action.
Type I failures break a written rule. Type II failures follow a flawed rule faithfully; these are the ones an insight should correct.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub system: String,
    pub user: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("unresolved template placeholder {{{0}}}")]
    UnresolvedPlaceholder(String),
    #[error("empty prompt input: {0}")]
    EmptyInput(&'static str),
    #[error("malformed verdict: {message}")]
    Malformed { message: String, raw: String },
    #[error("verdict breaks the output contract: {message}")]
    ContractBreach { message: String, raw: String },
    #[error("bank initialization output rejected: {message}")]
    InitInvalid { message: String, raw: String },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error("review failed after {attempts} attempts: {last}")]
    Exhausted { attempts: usize, last: Box<ReviewError> },
}

impl ReviewError {
    /// The raw provider text behind a parse failure, when there is one.
    pub fn raw(&self) -> Option<&str> {
        match self {
            ReviewError::Malformed { raw, .. }
            | ReviewError::ContractBreach { raw, .. }
            | ReviewError::InitInvalid { raw, .. } => Some(raw),
            ReviewError::Exhausted { last, .. } => last.raw(),
            _ => None,
        }
    }

    fn is_parse_failure(&self) -> bool {
        matches!(self, ReviewError::Malformed { .. } | ReviewError::ContractBreach { .. })
    }
}

/// Fills `{name}` placeholders and unescapes `{{`/`}}`.
pub fn render_template(template: &str, vars: &[(&str, &str)]) -> Result<String, ReviewError> {
    let mut out = String::with_capacity(template.len());
    let mut chars = template.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        match c {
            '{' if chars.peek().map(|(_, n)| *n) == Some('{') => {
                chars.next();
                out.push('{');
            }
            '}' if chars.peek().map(|(_, n)| *n) == Some('}') => {
                chars.next();
                out.push('}');
            }
            '{' => {
                let rest = &template[i + 1..];
                let end = rest
                    .find('}')
                    .ok_or_else(|| ReviewError::UnresolvedPlaceholder(rest.chars().take(20).collect()))?;
                let name = &rest[..end];
                let value = vars
                    .iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| ReviewError::UnresolvedPlaceholder(name.to_string()))?;
                out.push_str(value);
                for _ in 0..=end {
                    chars.next();
                }
            }
            other => out.push(other),
        }
    }
    Ok(out)
}

fn non_empty(value: &str, what: &'static str) -> Result<(), ReviewError> {
    if value.trim().is_empty() {
        Err(ReviewError::EmptyInput(what))
    } else {
        Ok(())
    }
}

fn system_prompt(domain_name: &str, taxonomy: &str) -> Result<String, ReviewError> {
    let mut system = render_template(SYSTEM_TEMPLATE, &[("domain_name", domain_name)])?;
    if !taxonomy.trim().is_empty() {
        system.push('\n');
        system.push_str(taxonomy.trim_end());
        system.push('\n');
    }
    Ok(system)
}

pub fn render_init_prompt(
    domain_name: &str,
    policy_text: &str,
    db_schema_text: &str,
    tool_overview_text: &str,
) -> Result<PromptPair, ReviewError> {
    non_empty(domain_name, "domain name")?;
    non_empty(policy_text, "policy text")?;
    non_empty(db_schema_text, "database schema")?;
    non_empty(tool_overview_text, "tool overview")?;
    let user = render_template(
        INIT_TEMPLATE,
        &[
            ("database_schema", db_schema_text),
            ("tool_overview", tool_overview_text),
            ("policy", policy_text),
        ],
    )?;
    Ok(PromptPair {
        system: system_prompt(domain_name, GAP_TAXONOMY)?,
        user: user.replace(INIT_SPLICE, COMMON_INSTRUCTIONS.trim_end()),
    })
}

/// Everything the reviewer sees about one completed task.
#[derive(Debug, Clone)]
pub struct ReviewContext<'a> {
    pub domain_name: &'a str,
    pub policy_text: &'a str,
    pub db_schema_text: &'a str,
    pub tool_overview_text: &'a str,
    pub bank: &'a BankSnapshot,
    pub trajectory: &'a Trajectory,
    pub feedback: &'a Feedback,
    pub gap_taxonomy_text: &'a str,
}

impl<'a> ReviewContext<'a> {
    pub fn for_bundle(
        bundle: &'a DomainBundle,
        schema: &'a str,
        overview: &'a str,
        bank: &'a BankSnapshot,
        trajectory: &'a Trajectory,
        feedback: &'a Feedback,
    ) -> Self {
        ReviewContext {
            domain_name: &bundle.name,
            policy_text: &bundle.policy_text,
            db_schema_text: schema,
            tool_overview_text: overview,
            bank,
            trajectory,
            feedback,
            gap_taxonomy_text: GAP_TAXONOMY,
        }
    }
}

/// Transcript of a trajectory, one event per line.
pub fn render_transcript(t: &Trajectory) -> String {
    let mut lines = Vec::new();
    for turn in &t.turns {
        let text = turn.text.as_deref().unwrap_or("");
        match turn.role {
            Role::User => lines.push(format!("[{}] USER: {text}", turn.index)),
            Role::System => lines.push(format!("[{}] SYSTEM: {text}", turn.index)),
            Role::Assistant => {
                if !text.is_empty() {
                    lines.push(format!("[{}] ASSISTANT: {text}", turn.index));
                }
                for call in &turn.tool_calls {
                    lines.push(format!(
                        "[{}] ASSISTANT CALLS {}: {}",
                        turn.index,
                        call.call_id,
                        call.signature()
                    ));
                }
            }
            Role::ToolResult => lines.push(format!(
                "[{}] TOOL RESULT {}: {text}",
                turn.index,
                turn.for_call_id.as_deref().unwrap_or("?")
            )),
        }
    }
    lines.push(format!("TERMINATION: {}", t.termination.label()));
    lines.join("\n")
}

/// The feedback block appended after the transcript. Only the fields the
/// regime supplies appear.
pub fn render_feedback(f: &Feedback) -> String {
    let mut lines = vec![
        "FEEDBACK".to_string(),
        format!("RESULT: {}", if f.reward { "PASS" } else { "FAIL" }),
    ];
    if let Some(e) = f.explanation.as_deref().filter(|e| !e.trim().is_empty()) {
        lines.push(format!("EXPECTED: {e}"));
    }
    if let Some(c) = f.oracle_clarification.as_deref().filter(|c| !c.trim().is_empty()) {
        lines.push(format!("POLICY CLARIFICATION: {c}"));
    }
    lines.join("\n")
}

pub fn render_review_prompt(ctx: &ReviewContext<'_>) -> Result<PromptPair, ReviewError> {
    non_empty(ctx.domain_name, "domain name")?;
    non_empty(ctx.policy_text, "policy text")?;
    non_empty(ctx.db_schema_text, "database schema")?;
    non_empty(ctx.tool_overview_text, "tool overview")?;
    non_empty(ctx.gap_taxonomy_text, "gap taxonomy")?;
    let trajectory = format!(
        "{}\n\n{}",
        render_transcript(ctx.trajectory),
        render_feedback(ctx.feedback)
    );
    let bank = ctx.bank.render_for_review();
    let user = render_template(
        REVIEW_TEMPLATE,
        &[
            ("database_schema", ctx.db_schema_text),
            ("tool_overview", ctx.tool_overview_text),
            ("policy", ctx.policy_text),
            ("policy_bank", &bank),
            ("trajectory", &trajectory),
        ],
    )?;
    Ok(PromptPair {
        system: system_prompt(ctx.domain_name, ctx.gap_taxonomy_text)?,
        user: user.replace(REVIEW_SPLICE, COMMON_INSTRUCTIONS.trim_end()),
    })
}

/// One entry as proposed by the reviewer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposedEntry {
    #[serde(default)]
    pub id: u32,
    pub tool: String,
    pub capability: String,
    pub spec_nl: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewVerdict {
    pub overall_success: bool,
    pub decision_explanation: String,
    pub entries: Vec<ProposedEntry>,
}

fn strip_fence(raw: &str) -> &str {
    let text = raw.trim();
    let Some(rest) = text.strip_prefix("```") else {
        return text;
    };
    let body = match rest.find('\n') {
        Some(nl) => &rest[nl + 1..],
        None => rest,
    };
    body.trim_end().strip_suffix("```").unwrap_or(body).trim()
}

/// Strict parse of a reviewer response.
pub fn parse_review_output(raw: &str) -> Result<ReviewVerdict, ReviewError> {
    let malformed = |message: String| ReviewError::Malformed {
        message,
        raw: raw.to_string(),
    };
    let doc: Json = serde_json::from_str(strip_fence(raw)).map_err(|e| malformed(e.to_string()))?;
    let obj = doc
        .as_object()
        .ok_or_else(|| malformed("top-level value is not an object".into()))?;
    let overall_success = obj
        .get("overall_success")
        .and_then(Json::as_bool)
        .ok_or_else(|| malformed("overall_success must be a boolean".into()))?;
    let decision_explanation = match obj.get("decision_explanation") {
        Some(Json::String(s)) if !s.trim().is_empty() => s.clone(),
        _ => {
            return Err(ReviewError::ContractBreach {
                message: "decision_explanation is missing or empty".into(),
                raw: raw.to_string(),
            })
        }
    };
    let items = obj
        .get("entries")
        .and_then(Json::as_array)
        .ok_or_else(|| malformed("entries must be a list".into()))?;
    let mut entries = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let field = |name: &str| -> Result<String, ReviewError> {
            item.get(name)
                .and_then(Json::as_str)
                .map(str::to_string)
                .ok_or_else(|| malformed(format!("entries[{i}].{name} must be a string")))
        };
        let id = match item.get("id") {
            None | Some(Json::Null) => 0,
            Some(v) => v
                .as_u64()
                .and_then(|n| u32::try_from(n).ok())
                .ok_or_else(|| malformed(format!("entries[{i}].id must be a non-negative integer")))?,
        };
        entries.push(ProposedEntry {
            id,
            tool: field("tool")?,
            capability: field("capability")?,
            spec_nl: field("spec_nl")?,
        });
    }
    Ok(ReviewVerdict {
        overall_success,
        decision_explanation,
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedProposal {
    pub proposal: ProposedEntry,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidatedOps {
    pub ops: Vec<ReviewOp>,
    pub dropped: Vec<DroppedProposal>,
}

/// Classifies proposals against the current bank. A proposal whose (tool,
/// capability) exists revises that entry; one reusing an existing id for the
/// same tool revises it in place; anything else is an add. Unusable
/// proposals are dropped and logged.
pub fn validate_ops<R: ToolRegistry + ?Sized>(
    verdict: &ReviewVerdict,
    bank: &BankSnapshot,
    registry: &R,
) -> ValidatedOps {
    let mut out = ValidatedOps::default();
    for proposal in &verdict.entries {
        let mut drop = |reason: String| {
            tracing::warn!(tool = %proposal.tool, capability = %proposal.capability, %reason, "dropping reviewer proposal");
            out.dropped.push(DroppedProposal {
                proposal: proposal.clone(),
                reason,
            });
        };
        let tool = proposal.tool.trim();
        if !registry.contains_tool(tool) {
            drop(format!("unknown tool {tool:?}"));
            continue;
        }
        let capability = to_snake_case(&proposal.capability);
        if capability.is_empty() {
            drop("empty capability".into());
            continue;
        }
        let spec_nl = SpecNl::parse(&proposal.spec_nl);
        if spec_nl.is_empty() {
            drop("empty spec_nl".into());
            continue;
        }
        let entry = |id: u32| PolicyEntry::new(id, tool, capability.clone(), spec_nl.clone());
        let op = if let Some(existing) = bank.find(tool, &capability) {
            ReviewOp::Revise(entry(existing.id))
        } else if bank.get(proposal.id).is_some_and(|e| e.tool == tool) {
            ReviewOp::Revise(entry(proposal.id))
        } else {
            ReviewOp::Add(entry(proposal.id))
        };
        out.ops.push(op);
    }
    if out.ops.is_empty() {
        out.ops.push(ReviewOp::Omit);
    }
    out
}

/// One provider exchange made during a review.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewAttempt {
    pub prompt: PromptPair,
    pub raw: String,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewOutcome {
    pub verdict: ReviewVerdict,
    pub ops: ValidatedOps,
    pub snapshot: BankSnapshot,
    pub attempts: Vec<ReviewAttempt>,
}

#[derive(Debug)]
pub struct ReviewFailure {
    pub error: ReviewError,
    pub attempts: Vec<ReviewAttempt>,
}

impl ReviewFailure {
    /// The unchanged bank a stream continues with.
    pub fn fallback_snapshot(&self, bank: &BankSnapshot, step: u32) -> BankSnapshot {
        BankSnapshot {
            step,
            provenance: format!("review failed: {}", self.error),
            entries: bank.entries.clone(),
        }
    }
}

fn retry_prompt(base: &PromptPair, error: &ReviewError) -> PromptPair {
    PromptPair {
        system: base.system.clone(),
        user: format!(
            "{}\n\nYour previous response could not be used: {error}\nRespond again with ONLY the JSON object.",
            base.user
        ),
    }
}

/// Calls the provider until `parse` accepts the output or the retry budget
/// is spent.
fn call_with_retries<T>(
    prompt: &PromptPair,
    provider: &dyn ChatProvider,
    model: &str,
    retry_budget: u32,
    parse: impl Fn(&str) -> Result<T, ReviewError>,
) -> Result<(T, Vec<ReviewAttempt>), ReviewFailure> {
    let mut attempts = Vec::new();
    let mut current = prompt.clone();
    let mut last_error = None;
    for _ in 0..=retry_budget {
        let req = ChatRequest::new(
            model,
            vec![ChatMessage::system(&current.system), ChatMessage::user(&current.user)],
        );
        let raw = match provider.chat(&req) {
            Ok(resp) => resp.text.unwrap_or_default(),
            Err(e) => {
                return Err(ReviewFailure {
                    error: ReviewError::Provider(e),
                    attempts,
                })
            }
        };
        match parse(&raw) {
            Ok(value) => {
                attempts.push(ReviewAttempt {
                    prompt: current,
                    raw,
                    error: None,
                });
                return Ok((value, attempts));
            }
            Err(e) if e.is_parse_failure() => {
                attempts.push(ReviewAttempt {
                    prompt: current.clone(),
                    raw,
                    error: Some(e.to_string()),
                });
                current = retry_prompt(prompt, &e);
                last_error = Some(e);
            }
            Err(e) => return Err(ReviewFailure { error: e, attempts }),
        }
    }
    let last = last_error.expect("at least one attempt was made");
    Err(ReviewFailure {
        error: ReviewError::Exhausted {
            attempts: attempts.len(),
            last: Box::new(last),
        },
        attempts,
    })
}

/// Render, call, parse, validate and apply: produces the snapshot for
/// `step`.
pub fn review_step<R: ToolRegistry + ?Sized>(
    ctx: &ReviewContext<'_>,
    registry: &R,
    provider: &dyn ChatProvider,
    model: &str,
    retry_budget: u32,
    step: u32,
    provenance: &str,
) -> Result<ReviewOutcome, ReviewFailure> {
    let prompt = render_review_prompt(ctx).map_err(|error| ReviewFailure {
        error,
        attempts: Vec::new(),
    })?;
    let (verdict, attempts) = call_with_retries(&prompt, provider, model, retry_budget, parse_review_output)?;
    let ops = validate_ops(&verdict, ctx.bank, registry);
    match apply_review_ops(ctx.bank, &ops.ops, step, provenance) {
        Ok(snapshot) => Ok(ReviewOutcome {
            verdict,
            ops,
            snapshot,
            attempts,
        }),
        Err(e) => Err(ReviewFailure {
            error: e.into(),
            attempts,
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitOutcome {
    pub snapshot: BankSnapshot,
    pub verdict: ReviewVerdict,
    pub attempts: Vec<ReviewAttempt>,
}

/// Converts an initialization verdict into the step-0 bank. Unlike review
/// validation this is strict: any unusable entry rejects the whole output.
pub fn bank_from_init_verdict<R: ToolRegistry + ?Sized>(
    verdict: &ReviewVerdict,
    registry: &R,
    raw: &str,
) -> Result<BankSnapshot, ReviewError> {
    let invalid = |message: String| ReviewError::InitInvalid {
        message,
        raw: raw.to_string(),
    };
    let mut entries: Vec<PolicyEntry> = Vec::new();
    let mut keys = BTreeSet::new();
    let mut ids = BTreeSet::new();
    for proposal in &verdict.entries {
        if !registry.contains_tool(&proposal.tool) {
            return Err(invalid(format!("unknown tool {:?}", proposal.tool)));
        }
        let capability = to_snake_case(&proposal.capability);
        if capability.is_empty() {
            return Err(invalid(format!("entry for {} has an empty capability", proposal.tool)));
        }
        let spec_nl = SpecNl::parse(&proposal.spec_nl);
        if spec_nl.is_empty() {
            return Err(invalid(format!(
                "entry {} :: {capability} has empty spec_nl",
                proposal.tool
            )));
        }
        if !keys.insert((proposal.tool.clone(), capability.clone())) {
            return Err(invalid(format!("duplicate entry {} :: {capability}", proposal.tool)));
        }
        if proposal.id == 0 || !ids.insert(proposal.id) {
            return Err(invalid(format!("entry id {} is missing or repeated", proposal.id)));
        }
        entries.push(PolicyEntry::new(
            proposal.id,
            proposal.tool.clone(),
            capability,
            spec_nl,
        ));
    }
    entries.sort_by_key(|e| e.id);
    Ok(BankSnapshot {
        step: 0,
        provenance: "init".into(),
        entries,
    })
}

/// Builds the step-0 bank from the domain's policy documents.
pub fn init_bank(
    bundle: &DomainBundle,
    provider: &dyn ChatProvider,
    model: &str,
    retry_budget: u32,
) -> Result<InitOutcome, ReviewFailure> {
    let prompt = render_init_prompt(
        &bundle.name,
        &bundle.policy_text,
        &bundle.schema_text(),
        &bundle.tool_overview_text(),
    )
    .map_err(|error| ReviewFailure {
        error,
        attempts: Vec::new(),
    })?;
    let (verdict, attempts) = call_with_retries(&prompt, provider, model, retry_budget, parse_review_output)?;
    let raw = attempts.last().map(|a| a.raw.clone()).unwrap_or_default();
    match bank_from_init_verdict(&verdict, bundle, &raw) {
        Ok(snapshot) => Ok(InitOutcome {
            snapshot,
            verdict,
            attempts,
        }),
        Err(error) => Err(ReviewFailure { error, attempts }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_placeholders() {
        assert_eq!(render_template("a {x} {{y}}", &[("x", "1")]).unwrap(), "a 1 {y}");
        match render_template("{missing}", &[]) {
            Err(ReviewError::UnresolvedPlaceholder(name)) => assert_eq!(name, "missing"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn init_prompt_splices_common_instructions() {
        let p = render_init_prompt("airline", "policy", "schema", "tools").unwrap();
        assert!(p.user.contains("respond with ONLY the JSON object"));
        assert!(p.user.contains("AT MOST ONE entry"));
        assert!(!p.user.contains("go here]"));
        assert!(p.system.contains("operating in the airline domain"));
        assert!(p.system.contains("must start with `{` and end with `}`"));
        assert!(matches!(
            render_init_prompt("airline", " ", "schema", "tools"),
            Err(ReviewError::EmptyInput(_))
        ));
        assert_eq!(p, render_init_prompt("airline", "policy", "schema", "tools").unwrap());
    }

    #[test]
    fn parse_minimal_and_fenced() {
        let raw = r#"{"overall_success": true, "decision_explanation": "ok", "entries": []}"#;
        let v = parse_review_output(raw).unwrap();
        assert!(v.entries.is_empty());
        let fenced = format!("```json\n{raw}\n```");
        assert_eq!(parse_review_output(&fenced).unwrap(), v);
        let bare_fence = format!("```\n{raw}\n```");
        assert_eq!(parse_review_output(&bare_fence).unwrap(), v);
    }

    #[test]
    fn missing_explanation_is_contract_breach() {
        let raw = r#"{"overall_success": true, "entries": []}"#;
        let err = parse_review_output(raw).unwrap_err();
        assert!(matches!(err, ReviewError::ContractBreach { .. }));
        assert_eq!(err.raw(), Some(raw));
        assert!(matches!(
            parse_review_output("nope"),
            Err(ReviewError::Malformed { .. })
        ));
    }

    #[test]
    fn strip_fence_keeps_plain_text() {
        assert_eq!(strip_fence("  {}  "), "{}");
        assert_eq!(strip_fence("```json\n{}\n```"), "{}");
    }
}
