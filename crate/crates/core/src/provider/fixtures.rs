use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{request_digest, ChatProvider, ChatRequest, ChatResponse, ProviderError};

/// One recorded request/response pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub digest: String,
    pub request: ChatRequest,
    pub response: ChatResponse,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// A directory of `<digest>.json` files.
#[derive(Debug)]
pub struct FixtureStore {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl FixtureStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, ProviderError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| ProviderError::Config(format!("fixture dir {}: {e}", dir.display())))?;
        Ok(FixtureStore {
            dir,
            write_lock: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }

    pub fn get(&self, digest: &str) -> Result<Option<FixtureRecord>, ProviderError> {
        let path = self.path_for(digest);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| ProviderError::Malformed(format!("fixture {}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(ProviderError::Config(format!("fixture {}: {e}", path.display()))),
        }
    }

    /// Stores a pair. Re-recording an identical pair is a no-op; a different
    /// payload under an existing digest is refused.
    pub fn put(&self, req: &ChatRequest, resp: &ChatResponse) -> Result<String, ProviderError> {
        let digest = request_digest(req);
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(existing) = self.get(&digest)? {
            if &existing.request == req && &existing.response == resp {
                return Ok(digest);
            }
            return Err(ProviderError::Record(format!(
                "digest {digest} already holds a different payload"
            )));
        }
        let record = FixtureRecord {
            digest: digest.clone(),
            request: req.clone(),
            response: resp.clone(),
        };
        let mut bytes = serde_json::to_vec_pretty(&record).map_err(|e| ProviderError::Record(e.to_string()))?;
        bytes.push(b'\n');
        let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
        let tmp = self.dir.join(format!(".{digest}.{}.{n}.tmp", std::process::id()));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, self.path_for(&digest))
        };
        write().map_err(|e| ProviderError::Record(format!("writing {digest}: {e}")))?;
        Ok(digest)
    }

    pub fn len(&self) -> usize {
        fs::read_dir(&self.dir)
            .map(|rd| {
                rd.filter_map(Result::ok)
                    .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
                    .count()
            })
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Answers only from the fixture store.
pub struct ReplayProvider {
    store: FixtureStore,
}

impl ReplayProvider {
    pub fn new(store: FixtureStore) -> Self {
        ReplayProvider { store }
    }
}

impl ChatProvider for ReplayProvider {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let digest = request_digest(req);
        match self.store.get(&digest)? {
            Some(record) => Ok(record.response),
            None => Err(ProviderError::FixtureMiss { digest }),
        }
    }
}

/// Forwards to an inner provider and records every exchange.
pub struct RecordingProvider<P> {
    inner: P,
    store: FixtureStore,
}

impl<P: ChatProvider> RecordingProvider<P> {
    pub fn new(inner: P, store: FixtureStore) -> Self {
        RecordingProvider { inner, store }
    }
}

impl<P: ChatProvider> ChatProvider for RecordingProvider<P> {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let resp = self.inner.chat(req)?;
        self.store.put(req, &resp)?;
        Ok(resp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{ChatMessage, FnProvider};

    fn req(text: &str) -> ChatRequest {
        ChatRequest::new("agent", vec![ChatMessage::user(text)])
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let recorder = RecordingProvider::new(
            FnProvider(|r: &ChatRequest| Ok(ChatResponse::text(format!("echo {}", r.last_user_text().unwrap())))),
            FixtureStore::open(dir.path()).unwrap(),
        );
        let live = recorder.chat(&req("a")).unwrap();
        let replay = ReplayProvider::new(FixtureStore::open(dir.path()).unwrap());
        assert_eq!(replay.chat(&req("a")).unwrap(), live);
        match replay.chat(&req("b")) {
            Err(ProviderError::FixtureMiss { digest }) => assert_eq!(digest, request_digest(&req("b"))),
            other => panic!("expected miss, got {other:?}"),
        }
    }

    #[test]
    fn conflicting_record_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let store = FixtureStore::open(dir.path()).unwrap();
        store.put(&req("a"), &ChatResponse::text("one")).unwrap();
        store.put(&req("a"), &ChatResponse::text("one")).unwrap();
        assert_eq!(store.len(), 1);
        assert!(matches!(
            store.put(&req("a"), &ChatResponse::text("two")),
            Err(ProviderError::Record(_))
        ));
        assert_eq!(
            store.get(&request_digest(&req("a"))).unwrap().unwrap().response,
            ChatResponse::text("one")
        );
    }
}
