//! The policy bank: versioned tool-capability insights with header listing,
//! retrieval and review-op application.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::ToolRegistry;

pub const SCHEMA_VERSION: u32 = 1;

const LABELS: [&str; 5] = ["TRIGGER", "PRECONDITIONS", "ELIGIBILITY", "ACTION", "KEY INSIGHT"];

/// Structured natural-language insight for one capability.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SpecNl {
    #[serde(default)]
    pub trigger: String,
    #[serde(default)]
    pub preconditions: String,
    #[serde(default)]
    pub eligibility: String,
    #[serde(default)]
    pub action: String,
    #[serde(default)]
    pub key_insight: Option<String>,
    #[serde(default)]
    pub freeform: Option<String>,
}

impl SpecNl {
    pub fn freeform(text: impl Into<String>) -> Self {
        SpecNl {
            freeform: Some(text.into()),
            ..SpecNl::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.fields().iter().all(|(_, v)| v.trim().is_empty())
            && self.freeform.as_deref().is_none_or(|f| f.trim().is_empty())
    }

    fn fields(&self) -> [(&'static str, &str); 5] {
        [
            (LABELS[0], self.trigger.as_str()),
            (LABELS[1], self.preconditions.as_str()),
            (LABELS[2], self.eligibility.as_str()),
            (LABELS[3], self.action.as_str()),
            (LABELS[4], self.key_insight.as_deref().unwrap_or("")),
        ]
    }

    fn field_mut(&mut self, label: &str) -> &mut String {
        match label {
            "TRIGGER" => &mut self.trigger,
            "PRECONDITIONS" => &mut self.preconditions,
            "ELIGIBILITY" => &mut self.eligibility,
            "ACTION" => &mut self.action,
            _ => self.key_insight.get_or_insert_with(String::new),
        }
    }

    /// Splits labeled text into fields. Text that carries no labels at all is
    /// kept whole as freeform; unlabeled lines before the first label are
    /// kept as freeform too.
    pub fn parse(text: &str) -> SpecNl {
        let mut spec = SpecNl::default();
        let mut current: Option<&'static str> = None;
        let mut preamble: Vec<&str> = Vec::new();
        for line in text.lines() {
            let trimmed = line.trim();
            let labeled = LABELS.iter().find_map(|label| {
                trimmed
                    .strip_prefix(label)
                    .and_then(|rest| rest.strip_prefix(':'))
                    .map(|rest| (*label, rest.trim()))
            });
            match (labeled, current) {
                (Some((label, rest)), _) => {
                    let field = spec.field_mut(label);
                    if !field.is_empty() {
                        field.push('\n');
                    }
                    field.push_str(rest);
                    current = Some(label);
                }
                (None, Some(label)) => {
                    if !trimmed.is_empty() {
                        let field = spec.field_mut(label);
                        field.push('\n');
                        field.push_str(trimmed);
                    }
                }
                (None, None) => preamble.push(line),
            }
        }
        if current.is_none() {
            let whole = text.trim();
            return if whole.is_empty() {
                SpecNl::default()
            } else {
                SpecNl::freeform(whole)
            };
        }
        let pre = preamble.join("\n").trim().to_string();
        if !pre.is_empty() {
            spec.freeform = Some(pre);
        }
        spec
    }

    /// One labeled line per non-empty field in fixed order, then any
    /// freeform text.
    pub fn render(&self) -> String {
        let mut lines: Vec<String> = self
            .fields()
            .iter()
            .filter(|(_, v)| !v.trim().is_empty())
            .map(|(label, v)| format!("{label}: {v}"))
            .collect();
        if let Some(free) = self.freeform.as_deref().filter(|f| !f.trim().is_empty()) {
            lines.push(free.to_string());
        }
        lines.join("\n")
    }
}

impl fmt::Display for SpecNl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyEntry {
    pub id: u32,
    pub tool: String,
    pub capability: String,
    pub spec_nl: SpecNl,
    #[serde(default)]
    pub created_step: u32,
    #[serde(default)]
    pub revised_step: Option<u32>,
}

impl PolicyEntry {
    pub fn new(id: u32, tool: impl Into<String>, capability: impl Into<String>, spec_nl: SpecNl) -> Self {
        PolicyEntry {
            id,
            tool: tool.into(),
            capability: capability.into(),
            spec_nl,
            created_step: 0,
            revised_step: None,
        }
    }

    pub fn header(&self) -> String {
        format!("{}. {} :: {}", self.id, self.tool, self.capability)
    }

    pub fn key(&self) -> (&str, &str) {
        (&self.tool, &self.capability)
    }

    /// Header followed by the rendered insight.
    pub fn render(&self) -> String {
        format!("{}\n{}", self.header(), self.spec_nl.render())
    }
}

/// The memory at one step of a run.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BankSnapshot {
    pub step: u32,
    pub provenance: String,
    pub entries: Vec<PolicyEntry>,
}

/// A memory operation proposed by the reviewer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "entry", rename_all = "snake_case")]
pub enum ReviewOp {
    Add(PolicyEntry),
    Revise(PolicyEntry),
    Omit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum BankDiff {
    Added {
        entry: PolicyEntry,
    },
    Revised {
        id: u32,
        old: PolicyEntry,
        new: PolicyEntry,
    },
    Removed {
        entry: PolicyEntry,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum BankError {
    #[error("revise targets nonexistent entry id {0}")]
    UnknownRevision(u32),
    #[error("snapshot step must increase: {from} -> {to}")]
    StepRegression { from: u32, to: u32 },
    #[error("invalid entry: {0}")]
    InvalidEntry(String),
    #[error("bank schema version {found} does not match supported version {expected}")]
    SchemaVersion { found: u64, expected: u32 },
    #[error("bank file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bank file is not valid: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Serialize)]
struct BankFileOut<'a> {
    schema_version: u32,
    step: u32,
    provenance: &'a str,
    entries: &'a [PolicyEntry],
}

#[derive(Deserialize)]
struct BankFileIn {
    step: u32,
    provenance: String,
    entries: Vec<PolicyEntry>,
}

impl BankSnapshot {
    pub fn empty(provenance: impl Into<String>) -> Self {
        BankSnapshot {
            step: 0,
            provenance: provenance.into(),
            entries: Vec::new(),
        }
    }

    pub fn get(&self, id: u32) -> Option<&PolicyEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn find(&self, tool: &str, capability: &str) -> Option<&PolicyEntry> {
        self.entries
            .iter()
            .find(|e| e.tool == tool && e.capability == capability)
    }

    pub fn ids(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.id).collect()
    }

    pub fn next_id(&self) -> u32 {
        self.entries.iter().map(|e| e.id).max().unwrap_or(0) + 1
    }

    pub fn file_name(step: u32) -> String {
        format!("bank_step_{step}.json")
    }

    /// Deterministic file bytes.
    pub fn to_file_bytes(&self) -> Vec<u8> {
        let doc = BankFileOut {
            schema_version: SCHEMA_VERSION,
            step: self.step,
            provenance: &self.provenance,
            entries: &self.entries,
        };
        let mut bytes = serde_json::to_vec_pretty(&doc).expect("bank serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn from_file_bytes(bytes: &[u8]) -> Result<BankSnapshot, BankError> {
        let raw: serde_json::Value = serde_json::from_slice(bytes)?;
        let found = raw.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0);
        if found != u64::from(SCHEMA_VERSION) {
            return Err(BankError::SchemaVersion {
                found,
                expected: SCHEMA_VERSION,
            });
        }
        let file: BankFileIn = serde_json::from_value(raw)?;
        Ok(BankSnapshot {
            step: file.step,
            provenance: file.provenance,
            entries: file.entries,
        })
    }

    /// Renders the bank as the JSON entry list the reviewer reads and writes.
    pub fn render_for_review(&self) -> String {
        let items: Vec<serde_json::Value> = self
            .entries
            .iter()
            .map(|e| {
                serde_json::json!({
                    "id": e.id,
                    "tool": e.tool,
                    "capability": e.capability,
                    "spec_nl": e.spec_nl.render(),
                })
            })
            .collect();
        serde_json::to_string_pretty(&items).expect("entries serialize")
    }
}

pub fn list_headers(bank: &BankSnapshot) -> Vec<String> {
    let mut entries: Vec<&PolicyEntry> = bank.entries.iter().collect();
    entries.sort_by_key(|e| e.id);
    entries.iter().map(|e| e.header()).collect()
}

/// Rendered entries for `ids` in id order, plus the requested ids that do
/// not exist.
pub fn get_entries(bank: &BankSnapshot, ids: &[u32]) -> (Vec<(String, String)>, Vec<u32>) {
    let wanted: BTreeSet<u32> = ids.iter().copied().collect();
    let mut found = Vec::new();
    let mut missing = Vec::new();
    for id in wanted {
        match bank.get(id) {
            Some(e) => found.push((e.header(), e.spec_nl.render())),
            None => missing.push(id),
        }
    }
    (found, missing)
}

fn check_entry(entry: &PolicyEntry) -> Result<(), BankError> {
    if entry.tool.trim().is_empty() {
        return Err(BankError::InvalidEntry("empty tool name".into()));
    }
    if !is_snake_case(&entry.capability) {
        return Err(BankError::InvalidEntry(format!(
            "capability {:?} is not snake_case",
            entry.capability
        )));
    }
    if entry.spec_nl.is_empty() {
        return Err(BankError::InvalidEntry(format!(
            "entry {} :: {} has empty spec_nl",
            entry.tool, entry.capability
        )));
    }
    Ok(())
}

/// Applies reviewer operations, producing the snapshot for `step`.
pub fn apply_review_ops(
    bank: &BankSnapshot,
    ops: &[ReviewOp],
    step: u32,
    provenance: &str,
) -> Result<BankSnapshot, BankError> {
    if step <= bank.step {
        return Err(BankError::StepRegression {
            from: bank.step,
            to: step,
        });
    }
    let mut entries: BTreeMap<u32, PolicyEntry> = bank.entries.iter().map(|e| (e.id, e.clone())).collect();
    let mut notes = Vec::new();

    for op in ops {
        match op {
            ReviewOp::Omit => {}
            ReviewOp::Add(proposed) => {
                check_entry(proposed)?;
                let holder = entries.values().find(|e| e.key() == proposed.key()).map(|e| e.id);
                if let Some(id) = holder {
                    let target = entries.get_mut(&id).expect("holder exists");
                    target.spec_nl = proposed.spec_nl.clone();
                    target.revised_step = Some(step);
                    notes.push(format!(
                        "add {} :: {} coerced to revise of {id}",
                        proposed.tool, proposed.capability
                    ));
                    continue;
                }
                let mut entry = proposed.clone();
                if entry.id == 0 || entries.contains_key(&entry.id) {
                    let assigned = entries.keys().max().copied().unwrap_or(0) + 1;
                    notes.push(format!("proposed id {} stored as {assigned}", entry.id));
                    entry.id = assigned;
                }
                entry.created_step = step;
                entry.revised_step = None;
                entries.insert(entry.id, entry);
            }
            ReviewOp::Revise(proposed) => {
                check_entry(proposed)?;
                if !entries.contains_key(&proposed.id) {
                    return Err(BankError::UnknownRevision(proposed.id));
                }
                let other_holder = entries
                    .values()
                    .find(|e| e.id != proposed.id && e.key() == proposed.key())
                    .map(|e| e.id);
                let target_id = match other_holder {
                    Some(id) => {
                        notes.push(format!(
                            "revise of {} redirected to {id}, which holds {} :: {}",
                            proposed.id, proposed.tool, proposed.capability
                        ));
                        id
                    }
                    None => proposed.id,
                };
                let target = entries.get_mut(&target_id).expect("target exists");
                target.tool = proposed.tool.clone();
                target.capability = proposed.capability.clone();
                target.spec_nl = proposed.spec_nl.clone();
                target.revised_step = Some(step);
            }
        }
    }

    let entries: Vec<PolicyEntry> = entries.into_values().collect();
    let unchanged = entries
        .iter()
        .map(|e| (e.id, &e.tool, &e.capability, &e.spec_nl))
        .eq(bank.entries.iter().map(|e| (e.id, &e.tool, &e.capability, &e.spec_nl)));
    if unchanged {
        return Ok(BankSnapshot {
            step,
            provenance: format!("{provenance}: no change"),
            entries: bank.entries.clone(),
        });
    }
    let provenance = if notes.is_empty() {
        provenance.to_string()
    } else {
        format!("{provenance} ({})", notes.join("; "))
    };
    Ok(BankSnapshot {
        step,
        provenance,
        entries,
    })
}

pub fn diff_snapshots(a: &BankSnapshot, b: &BankSnapshot) -> Vec<BankDiff> {
    let old: BTreeMap<u32, &PolicyEntry> = a.entries.iter().map(|e| (e.id, e)).collect();
    let new: BTreeMap<u32, &PolicyEntry> = b.entries.iter().map(|e| (e.id, e)).collect();
    let ids: BTreeSet<u32> = old.keys().chain(new.keys()).copied().collect();
    ids.into_iter()
        .filter_map(|id| match (old.get(&id), new.get(&id)) {
            (None, Some(e)) => Some(BankDiff::Added { entry: (*e).clone() }),
            (Some(e), None) => Some(BankDiff::Removed { entry: (*e).clone() }),
            (Some(o), Some(n)) if o != n => Some(BankDiff::Revised {
                id,
                old: (*o).clone(),
                new: (*n).clone(),
            }),
            _ => None,
        })
        .collect()
}

pub fn save_bank(bank: &BankSnapshot, path: &Path) -> Result<(), BankError> {
    fs::write(path, bank.to_file_bytes()).map_err(|source| BankError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_bank(path: &Path) -> Result<BankSnapshot, BankError> {
    let bytes = fs::read(path).map_err(|source| BankError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    BankSnapshot::from_file_bytes(&bytes)
}

/// Invariant violations of a snapshot against a registry; empty when sound.
pub fn check_invariants<R: ToolRegistry + ?Sized>(bank: &BankSnapshot, registry: &R) -> Vec<String> {
    let mut problems = Vec::new();
    let mut ids = BTreeSet::new();
    let mut keys = BTreeSet::new();
    let mut last_id = 0;
    for e in &bank.entries {
        if e.id == 0 {
            problems.push("entry id 0".to_string());
        }
        if !ids.insert(e.id) {
            problems.push(format!("duplicate id {}", e.id));
        }
        if e.id < last_id {
            problems.push(format!("entries out of id order at {}", e.id));
        }
        last_id = e.id;
        if !keys.insert((e.tool.clone(), e.capability.clone())) {
            problems.push(format!("duplicate pair {} :: {}", e.tool, e.capability));
        }
        if !registry.contains_tool(&e.tool) {
            problems.push(format!("unknown tool {:?}", e.tool));
        }
        if let Err(err) = check_entry(e) {
            problems.push(err.to_string());
        }
    }
    problems
}

pub fn is_snake_case(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
        && s.chars().next().is_some_and(|c| c.is_ascii_lowercase())
}

/// Lowercases and joins word runs with underscores.
pub fn to_snake_case(s: &str) -> String {
    let mut out = String::new();
    let mut prev_lower = false;
    for c in s.trim().chars() {
        if c.is_ascii_alphanumeric() {
            if c.is_ascii_uppercase() && prev_lower && !out.ends_with('_') {
                out.push('_');
            }
            out.push(c.to_ascii_lowercase());
            prev_lower = c.is_ascii_lowercase() || c.is_ascii_digit();
        } else {
            if !out.is_empty() && !out.ends_with('_') {
                out.push('_');
            }
            prev_lower = false;
        }
    }
    let trimmed = out.trim_matches('_').to_string();
    match trimmed.chars().next() {
        Some(c) if c.is_ascii_digit() => format!("c_{trimmed}"),
        _ => trimmed,
    }
}
