//! Bundle directories and the built-in micro-domains.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{DomainBundle, EnvError, PolicyGapSpec, Predicate, ToolDef};
use crate::model::{Database, TaskSpec};

pub const BUILTIN_DOMAINS: [&str; 2] = ["mini_airline", "mini_retail"];

struct Embedded {
    policy: &'static str,
    db: &'static str,
    tools: &'static str,
    tasks: &'static str,
    gaps: &'static str,
    predicates: &'static str,
}

macro_rules! embedded {
    ($dir:literal) => {
        Embedded {
            policy: include_str!(concat!("../../resources/domains/", $dir, "/policy.md")),
            db: include_str!(concat!("../../resources/domains/", $dir, "/db.json")),
            tools: include_str!(concat!("../../resources/domains/", $dir, "/tools.json")),
            tasks: include_str!(concat!("../../resources/domains/", $dir, "/tasks.json")),
            gaps: include_str!(concat!("../../resources/domains/", $dir, "/gaps.json")),
            predicates: include_str!(concat!("../../resources/domains/", $dir, "/predicates.json")),
        }
    };
}

fn parse<T: DeserializeOwned>(file: &str, text: &str) -> Result<T, EnvError> {
    serde_json::from_str(text).map_err(|e| EnvError::Schema {
        file: file.to_string(),
        reason: e.to_string(),
    })
}

fn finish(mut bundle: DomainBundle) -> Result<DomainBundle, EnvError> {
    bundle.tasks.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    let problems = bundle.validate();
    if problems.is_empty() {
        Ok(bundle)
    } else {
        Err(EnvError::Invalid(problems))
    }
}

pub fn builtin_domain(name: &str) -> Result<DomainBundle, EnvError> {
    let e = match name {
        "mini_airline" => embedded!("mini_airline"),
        "mini_retail" => embedded!("mini_retail"),
        other => return Err(EnvError::UnknownDomain(other.to_string())),
    };
    finish(DomainBundle {
        name: name.to_string(),
        policy_text: e.policy.to_string(),
        initial_db: parse("db.json", e.db)?,
        tools: parse("tools.json", e.tools)?,
        tasks: parse("tasks.json", e.tasks)?,
        gaps: parse("gaps.json", e.gaps)?,
        predicates: parse("predicates.json", e.predicates)?,
    })
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), EnvError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("bundle parts serialize");
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes the bundle directory layout: `bundle.json`, `policy.md`,
/// `db.json`, `tools.json`, `gaps.json`, `predicates.json`, `tasks/*.json`.
pub fn export_domain(bundle: &DomainBundle, dir: &Path) -> Result<(), EnvError> {
    fs::create_dir_all(dir.join("tasks"))?;
    write_json(&dir.join("bundle.json"), &serde_json::json!({ "name": bundle.name }))?;
    fs::write(dir.join("policy.md"), &bundle.policy_text)?;
    write_json(&dir.join("db.json"), &bundle.initial_db)?;
    write_json(&dir.join("tools.json"), &bundle.tools)?;
    write_json(&dir.join("gaps.json"), &bundle.gaps)?;
    write_json(&dir.join("predicates.json"), &bundle.predicates)?;
    for task in &bundle.tasks {
        write_json(&dir.join("tasks").join(format!("{}.json", task.task_id)), task)?;
    }
    Ok(())
}

fn read_required(dir: &Path, file: &str) -> Result<String, EnvError> {
    let path = dir.join(file);
    if !path.exists() {
        return Err(EnvError::MissingFile(path.display().to_string()));
    }
    Ok(fs::read_to_string(path)?)
}

fn read_optional<T: DeserializeOwned + Default>(dir: &Path, file: &str) -> Result<T, EnvError> {
    let path = dir.join(file);
    if !path.exists() {
        return Ok(T::default());
    }
    parse(file, &fs::read_to_string(path)?)
}

/// Loads and validates a bundle directory.
pub fn load_domain(dir: &Path) -> Result<DomainBundle, EnvError> {
    let policy_text = read_required(dir, "policy.md")?;
    let initial_db: Database = parse("db.json", &read_required(dir, "db.json")?)?;
    let tools: Vec<ToolDef> = parse("tools.json", &read_required(dir, "tools.json")?)?;
    let gaps: Vec<PolicyGapSpec> = read_optional(dir, "gaps.json")?;
    let predicates: BTreeMap<String, Vec<Predicate>> = read_optional(dir, "predicates.json")?;
    let meta: serde_json::Value = read_optional(dir, "bundle.json")?;
    let name = meta
        .get("name")
        .and_then(|n| n.as_str())
        .map(str::to_string)
        .or_else(|| dir.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_default();

    let tasks_dir = dir.join("tasks");
    if !tasks_dir.is_dir() {
        return Err(EnvError::MissingFile(tasks_dir.display().to_string()));
    }
    let mut tasks = Vec::new();
    for entry in fs::read_dir(&tasks_dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|x| x == "json") {
            let file = format!("tasks/{}", path.file_name().unwrap_or_default().to_string_lossy());
            let task: TaskSpec = parse(&file, &fs::read_to_string(&path)?)?;
            tasks.push(task);
        }
    }
    finish(DomainBundle {
        name,
        policy_text,
        initial_db,
        tools,
        tasks,
        gaps,
        predicates,
    })
}
