//! Table-driven tool handlers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{record_value, EffectKind, Fault, ToolDef};
use crate::model::{Database, Record};
use crate::value::Value;

/// Where a written field takes its value from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldSource {
    Param(String),
    Const(Value),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum Guard {
    /// The target record's field must equal `value`.
    FieldEquals {
        field: String,
        value: Value,
        message: String,
    },
    /// The target record's field must differ from `value`.
    FieldNotEquals {
        field: String,
        value: Value,
        message: String,
    },
    /// The id held by `param` must exist in `table`.
    RecordExists {
        table: String,
        param: String,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Handler {
    GetRecord {
        table: String,
        key_param: String,
    },
    FindRecords {
        table: String,
        /// Record field → parameter that must equal it.
        #[serde(rename = "match")]
        matches: BTreeMap<String, String>,
        #[serde(default)]
        ids_only: bool,
        #[serde(default)]
        empty_message: Option<String>,
    },
    InsertRecord {
        table: String,
        id_prefix: String,
        fields: BTreeMap<String, FieldSource>,
        #[serde(default)]
        guards: Vec<Guard>,
    },
    UpdateRecord {
        table: String,
        key_param: String,
        #[serde(default)]
        guards: Vec<Guard>,
        set: BTreeMap<String, FieldSource>,
    },
}

fn key<'a>(args: &'a BTreeMap<String, Value>, param: &str) -> Result<&'a str, Fault> {
    args.get(param)
        .and_then(Value::as_str)
        .ok_or_else(|| Fault(format!("argument {param:?} must be a string id")))
}

fn check_guards(
    guards: &[Guard],
    db: &Database,
    target: Option<&Record>,
    args: &BTreeMap<String, Value>,
) -> Result<(), Fault> {
    for guard in guards {
        match guard {
            Guard::FieldEquals { field, value, message } => {
                let actual = target.and_then(|r| r.get(field));
                if !actual.is_some_and(|a| a.numeric_eq(value)) {
                    return Err(Fault(message.clone()));
                }
            }
            Guard::FieldNotEquals { field, value, message } => {
                let actual = target.and_then(|r| r.get(field));
                if actual.is_some_and(|a| a.numeric_eq(value)) {
                    return Err(Fault(message.clone()));
                }
            }
            Guard::RecordExists { table, param, message } => {
                let id = key(args, param)?;
                if db.record(table, id).is_none() {
                    return Err(Fault(message.clone()));
                }
            }
        }
    }
    Ok(())
}

fn resolve(source: &FieldSource, args: &BTreeMap<String, Value>) -> Option<Value> {
    match source {
        FieldSource::Param(p) => args.get(p).cloned(),
        FieldSource::Const(v) => Some(v.clone()),
    }
}

impl Handler {
    pub fn effect(&self) -> EffectKind {
        match self {
            Handler::GetRecord { .. } | Handler::FindRecords { .. } => EffectKind::Read,
            Handler::InsertRecord { .. } | Handler::UpdateRecord { .. } => EffectKind::Write,
        }
    }

    /// Static consistency against the owning tool's parameters.
    pub fn check(&self, tool: &ToolDef) -> Result<(), String> {
        if self.effect() != tool.effect {
            return Err(format!(
                "handler effect {:?} differs from declared {:?}",
                self.effect(),
                tool.effect
            ));
        }
        let has = |p: &str| tool.parameters.iter().any(|q| q.name == p);
        let mut referenced: Vec<&str> = Vec::new();
        let guard_params = |guards: &'_ [Guard]| -> Vec<String> {
            guards
                .iter()
                .filter_map(|g| match g {
                    Guard::RecordExists { param, .. } => Some(param.clone()),
                    _ => None,
                })
                .collect()
        };
        let mut owned: Vec<String> = Vec::new();
        match self {
            Handler::GetRecord { key_param, .. } => referenced.push(key_param),
            Handler::FindRecords { matches, .. } => referenced.extend(matches.values().map(String::as_str)),
            Handler::InsertRecord { fields, guards, .. } => {
                owned.extend(guard_params(guards));
                referenced.extend(fields.values().filter_map(|s| match s {
                    FieldSource::Param(p) => Some(p.as_str()),
                    FieldSource::Const(_) => None,
                }));
            }
            Handler::UpdateRecord {
                key_param, guards, set, ..
            } => {
                referenced.push(key_param);
                owned.extend(guard_params(guards));
                referenced.extend(set.values().filter_map(|s| match s {
                    FieldSource::Param(p) => Some(p.as_str()),
                    FieldSource::Const(_) => None,
                }));
            }
        }
        referenced.extend(owned.iter().map(String::as_str));
        match referenced.into_iter().find(|p| !has(p)) {
            Some(p) => Err(format!("handler references undeclared parameter {p:?}")),
            None => Ok(()),
        }
    }

    pub fn run(&self, db: &Database, args: &BTreeMap<String, Value>) -> Result<(Database, Value), Fault> {
        match self {
            Handler::GetRecord { table, key_param } => {
                let id = key(args, key_param)?;
                db.record(table, id)
                    .map(|r| (db.clone(), record_value(r)))
                    .ok_or_else(|| Fault(format!("{id} not found in {table}")))
            }
            Handler::FindRecords {
                table,
                matches,
                ids_only,
                empty_message,
            } => {
                let rows = db.table(table).into_iter().flatten().filter(|(_, r)| {
                    matches
                        .iter()
                        .all(|(field, param)| match (r.get(field), args.get(param)) {
                            (Some(a), Some(b)) => a.numeric_eq(b),
                            _ => false,
                        })
                });
                let found: Vec<Value> = if *ids_only {
                    rows.map(|(id, _)| Value::from(id.as_str())).collect()
                } else {
                    rows.map(|(_, r)| record_value(r)).collect()
                };
                match empty_message {
                    Some(msg) if found.is_empty() => Err(Fault(msg.clone())),
                    _ => Ok((db.clone(), Value::List(found))),
                }
            }
            Handler::InsertRecord {
                table,
                id_prefix,
                fields,
                guards,
            } => {
                check_guards(guards, db, None, args)?;
                let existing = db.table(table).map_or(0, |t| t.len());
                let mut n = existing + 1;
                let id = loop {
                    let candidate = format!("{id_prefix}{n}");
                    if db.record(table, &candidate).is_none() {
                        break candidate;
                    }
                    n += 1;
                };
                let mut record: Record = fields
                    .iter()
                    .filter_map(|(f, s)| resolve(s, args).map(|v| (f.clone(), v)))
                    .collect();
                record.insert("id".into(), Value::from(id.as_str()));
                let mut next = db.clone();
                next.insert(table, id, record.clone());
                Ok((next, Value::Map(record)))
            }
            Handler::UpdateRecord {
                table,
                key_param,
                guards,
                set,
            } => {
                let id = key(args, key_param)?;
                let current = db
                    .record(table, id)
                    .ok_or_else(|| Fault(format!("{id} not found in {table}")))?;
                check_guards(guards, db, Some(current), args)?;
                let mut updated = current.clone();
                for (field, source) in set {
                    if let Some(v) = resolve(source, args) {
                        updated.insert(field.clone(), v);
                    }
                }
                let mut next = db.clone();
                next.insert(table, id, updated.clone());
                Ok((next, Value::Map(updated)))
            }
        }
    }
}
