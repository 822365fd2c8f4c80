//! Content-addressed record/replay for chat completions.
//!
//! Each interaction is stored as `<dir>/<fingerprint>.json`, where the
//! fingerprint hashes every request field. Replaying an identical request
//! returns the recorded response byte for byte; any perturbation (a
//! different temperature, seed or message) is a cache miss.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::chat::{fingerprint, ChatRequest, ChatResponse};
use super::{GatewayError, LlmClient};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayMode {
    /// Serve only from the archive; a miss is an error.
    Replay,
    /// Always call the backend and (re)write the archive entry.
    Record,
    /// Serve from the archive when present, otherwise call and record.
    Auto,
}

#[derive(Debug, Serialize, Deserialize)]
struct Recording {
    fingerprint: String,
    request: ChatRequest,
    response: ChatResponse,
}

/// Record/replay wrapper around another [`LlmClient`].
pub struct ReplayLlm {
    store: ContentStore,
    mode: ReplayMode,
    inner: Option<Arc<dyn LlmClient>>,
    locks: KeyLocks,
}

impl std::fmt::Debug for ReplayLlm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReplayLlm")
            .field("dir", &self.store.dir)
            .field("mode", &self.mode)
            .finish_non_exhaustive()
    }
}

impl ReplayLlm {
    /// Strict replay from `dir`.
    pub fn replay(dir: impl Into<PathBuf>) -> Self {
        Self { store: ContentStore::new(dir), mode: ReplayMode::Replay, inner: None, locks: KeyLocks::default() }
    }

    /// Wraps `inner`, recording into `dir` under the given mode.
    pub fn recording(dir: impl Into<PathBuf>, mode: ReplayMode, inner: Arc<dyn LlmClient>) -> Self {
        Self { store: ContentStore::new(dir), mode, inner: Some(inner), locks: KeyLocks::default() }
    }

    pub fn dir(&self) -> &Path {
        &self.store.dir
    }

    fn call_inner(&self, request: &ChatRequest, fp: &str) -> Result<ChatResponse, GatewayError> {
        let inner = self
            .inner
            .as_ref()
            .ok_or_else(|| GatewayError::CacheMiss { fingerprint: fp.to_string() })?;
        let response = inner.chat_complete(request)?;
        self.store.put(
            fp,
            &Recording { fingerprint: fp.to_string(), request: request.clone(), response: response.clone() },
        )?;
        Ok(response)
    }
}

impl LlmClient for ReplayLlm {
    fn chat_complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let fp = fingerprint(request);
        let lock = self.locks.get(&fp);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        match self.mode {
            ReplayMode::Record => self.call_inner(request, &fp),
            ReplayMode::Replay | ReplayMode::Auto => {
                if let Some(rec) = self.store.get::<Recording>(&fp)? {
                    return Ok(rec.response);
                }
                if self.mode == ReplayMode::Replay {
                    return Err(GatewayError::CacheMiss { fingerprint: fp });
                }
                self.call_inner(request, &fp)
            }
        }
    }
}

/// JSON documents addressed by key under a directory.
#[derive(Debug, Clone)]
pub(crate) struct ContentStore {
    pub(crate) dir: PathBuf,
}

impl ContentStore {
    pub(crate) fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub(crate) fn get<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>, GatewayError> {
        let path = self.path(key);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| GatewayError::Decode(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Writes through a temporary file and renames it into place so readers
    /// never observe a partial document.
    pub(crate) fn put<T: Serialize>(&self, key: &str, value: &T) -> Result<(), GatewayError> {
        fs::create_dir_all(&self.dir)?;
        let mut bytes = serde_json::to_vec_pretty(value)
            .map_err(|e| GatewayError::Decode(e.to_string()))?;
        bytes.push(b'\n');
        let tmp = self.dir.join(format!(".{key}.{}.tmp", std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.path(key))?;
        Ok(())
    }
}

/// One mutex per key; callers holding a key's guard have exclusive use of it.
#[derive(Debug, Default)]
pub(crate) struct KeyLocks {
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl KeyLocks {
    pub(crate) fn get(&self, key: &str) -> Arc<Mutex<()>> {
        let mut map = self.locks.lock().unwrap_or_else(|e| e.into_inner());
        map.entry(key.to_string()).or_default().clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateways::chat::{ChatMessage, GenerationParams};
    use crate::gateways::mock::ScriptedLlm;

    fn req() -> ChatRequest {
        ChatRequest::new(vec![ChatMessage::user("capital of france?")], &GenerationParams::default())
    }

    #[test]
    fn replays_recorded_pair_and_misses_on_perturbation() {
        let dir = tempfile::tempdir().unwrap();
        let backend = Arc::new(ScriptedLlm::repeat("Paris"));
        let recorder = ReplayLlm::recording(dir.path(), ReplayMode::Record, backend.clone());
        let recorded = recorder.chat_complete(&req()).unwrap();

        let replay = ReplayLlm::replay(dir.path());
        assert_eq!(replay.chat_complete(&req()).unwrap(), recorded);

        let mut warmer = req();
        warmer.temperature = 0.7;
        match replay.chat_complete(&warmer) {
            Err(GatewayError::CacheMiss { fingerprint: fp }) => assert_eq!(fp, fingerprint(&warmer)),
            other => panic!("expected cache miss, got {other:?}"),
        }
        assert_eq!(backend.calls(), 1);
    }

    #[test]
    fn auto_mode_calls_backend_once() {
        let dir = tempfile::tempdir().unwrap();
        let backend = Arc::new(ScriptedLlm::sequence(["first", "second"]));
        let auto = ReplayLlm::recording(dir.path(), ReplayMode::Auto, backend.clone());
        assert_eq!(auto.chat_complete(&req()).unwrap().text, "first");
        assert_eq!(auto.chat_complete(&req()).unwrap().text, "first");
        assert_eq!(backend.calls(), 1);
    }

    #[test]
    fn archive_files_are_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let backend = Arc::new(ScriptedLlm::repeat("Paris"));
        let rec = ReplayLlm::recording(dir.path(), ReplayMode::Record, backend);
        rec.chat_complete(&req()).unwrap();
        let path = dir.path().join(format!("{}.json", fingerprint(&req())));
        let first = fs::read(&path).unwrap();
        rec.chat_complete(&req()).unwrap();
        assert_eq!(first, fs::read(&path).unwrap());
    }
}
