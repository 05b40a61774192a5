use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use policybank::environment::{builtin_domain, BUILTIN_DOMAINS};
use policybank::evaluation::{run_stream, NullSink};
use policybank::provider::{FixtureStore, RecordingProvider};
use policybank::runtime::Providers;
use policybank::scripted::{fixture_matrix, ScriptedBackend};

fn shipped_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/replay")
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let Ok(entries) = fs::read_dir(dir) else {
        return out;
    };
    for entry in entries {
        let entry = entry.unwrap();
        let path = entry.path();
        if path.is_dir() {
            for (k, v) in read_tree(&path) {
                out.insert(format!("{}/{k}", entry.file_name().to_string_lossy()), v);
            }
        } else {
            out.insert(
                entry.file_name().to_string_lossy().into_owned(),
                fs::read(&path).unwrap(),
            );
        }
    }
    out
}

/// Records the fixture matrix against the scripted backend and checks the
/// result equals the shipped store. `PBK_REGENERATE_FIXTURES=1` rewrites it.
#[test]
fn shipped_fixtures_match_scripted_recording() {
    let tmp = tempfile::tempdir().unwrap();
    let bundles: Vec<_> = BUILTIN_DOMAINS.iter().map(|d| builtin_domain(d).unwrap()).collect();
    let recorder = RecordingProvider::new(
        ScriptedBackend::new(bundles.clone()),
        FixtureStore::open(tmp.path()).unwrap(),
    );
    let providers = Providers::uniform(Arc::new(recorder));
    for bundle in &bundles {
        for cfg in fixture_matrix() {
            run_stream(bundle, &cfg, &providers, &NullSink, None).unwrap();
        }
    }
    let fresh = read_tree(tmp.path());
    let shipped_dir = shipped_dir();
    if std::env::var("PBK_REGENERATE_FIXTURES").as_deref() == Ok("1") {
        let _ = fs::remove_dir_all(&shipped_dir);
        fs::create_dir_all(&shipped_dir).unwrap();
        for (name, bytes) in &fresh {
            let path = shipped_dir.join(name);
            fs::create_dir_all(path.parent().unwrap()).unwrap();
            fs::write(path, bytes).unwrap();
        }
    }
    let shipped = read_tree(&shipped_dir);
    let missing: Vec<_> = fresh.keys().filter(|k| !shipped.contains_key(*k)).take(5).collect();
    assert!(
        missing.is_empty(),
        "shipped store lacks {missing:?}; rerun with PBK_REGENERATE_FIXTURES=1"
    );
    let stale: Vec<_> = shipped.keys().filter(|k| !fresh.contains_key(*k)).take(5).collect();
    assert!(stale.is_empty(), "shipped store has unused fixtures {stale:?}");
    for (name, bytes) in &fresh {
        assert!(shipped[name] == *bytes, "fixture {name} differs from a fresh recording");
    }
}
