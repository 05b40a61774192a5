//! Turns a stored run spec into providers and drives it to completion.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use policybank::environment::{builtin_domain, load_domain, DomainBundle, BUILTIN_DOMAINS};
use policybank::evaluation::{
    render_report_table, render_stage_table, report_by_family_stage, run_stream, RunReport, StreamSink,
};
use policybank::provider::{ChatProvider, FixtureStore, LiveConfig, LiveProvider, RecordingProvider, ReplayProvider};
use policybank::runtime::{HumanFeedback, Providers};
use policybank::scripted::ScriptedBackend;

use crate::store::{ProviderKind, RunSpec, RunStatus, Store, REPORT_JSON, REPORT_TXT};

/// A built-in domain name or a bundle directory.
pub fn resolve_domain(name: &str) -> Result<DomainBundle> {
    if BUILTIN_DOMAINS.contains(&name) {
        return Ok(builtin_domain(name)?);
    }
    let path = Path::new(name);
    if path.is_dir() {
        return load_domain(path).with_context(|| format!("loading domain bundle {}", path.display()));
    }
    anyhow::bail!(
        "unknown domain {name:?}: expected one of {} or a bundle directory",
        BUILTIN_DOMAINS.join(", ")
    )
}

/// `$PBK_FIXTURES`, else the fixture store shipped with the core crate.
pub fn default_fixtures_dir() -> PathBuf {
    std::env::var_os("PBK_FIXTURES")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures/replay")))
}

pub fn build_providers(spec: &RunSpec, bundle: &DomainBundle) -> Result<Providers> {
    let fixtures = || -> Result<FixtureStore> {
        let dir = spec
            .fixtures
            .as_ref()
            .map(PathBuf::from)
            .unwrap_or_else(default_fixtures_dir);
        Ok(FixtureStore::open(dir)?)
    };
    let provider: Arc<dyn ChatProvider> = match spec.provider {
        ProviderKind::Scripted => Arc::new(ScriptedBackend::new(vec![bundle.clone()])),
        ProviderKind::Replay => Arc::new(ReplayProvider::new(fixtures()?)),
        ProviderKind::Live => Arc::new(LiveProvider::new(LiveConfig::from_env()?)),
        ProviderKind::Record => Arc::new(RecordingProvider::new(
            LiveProvider::new(LiveConfig::from_env()?),
            fixtures()?,
        )),
    };
    Ok(Providers::uniform(provider))
}

/// Runs (or resumes) a stored run and writes its report. The run record
/// ends as `done` or `failed`.
pub fn execute_run(store: &Store, run_id: &str, human: Option<&dyn HumanFeedback>) -> Result<RunReport> {
    execute_run_with_sink(store, run_id, &store.sink(run_id), human)
}

pub fn execute_run_with_sink(
    store: &Store,
    run_id: &str,
    sink: &dyn StreamSink,
    human: Option<&dyn HumanFeedback>,
) -> Result<RunReport> {
    let record = store.record(run_id)?;
    let outcome = (|| -> Result<RunReport> {
        let bundle = resolve_domain(&record.spec.domain)?;
        let providers = build_providers(&record.spec, &bundle)?;
        let report = run_stream(&bundle, &record.spec.config, &providers, sink, human)?;
        let mut json = serde_json::to_vec_pretty(&report)?;
        json.push(b'\n');
        store.put(run_id, REPORT_JSON, &json)?;
        store.put(run_id, REPORT_TXT, report_text(&report).as_bytes())?;
        Ok(report)
    })();
    match &outcome {
        Ok(_) => {
            store.update_record(run_id, |r| {
                r.status = RunStatus::Done;
                r.pending = None;
            })?;
        }
        Err(e) => {
            let message = format!("{e:#}");
            store.update_record(run_id, |r| {
                r.status = RunStatus::Failed;
                r.pending = None;
                r.error = Some(message);
            })?;
        }
    }
    outcome
}

/// Report table followed by the family-stage breakdown.
pub fn report_text(report: &RunReport) -> String {
    let mut text = format!("domain: {}\n\n{}", report.domain, render_report_table(&[report]));
    let stages = report_by_family_stage(report);
    if !stages.is_empty() {
        text.push_str("\nfamily stage (mean reward per trial)\n");
        text.push_str(&render_stage_table(&stages));
    }
    text
}
