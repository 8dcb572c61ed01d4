use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Role;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachedReply {
    pub backend: String,
    pub role: Role,
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Reply cache keyed by (backend id, role, prompt hash).
///
/// With a directory, every record is also written as `<key>.json` through a
/// temporary file and a rename, so concurrent writers never expose a torn
/// record. Records are never rewritten.
pub struct ResponseCache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, CachedReply>>,
    tmp_counter: AtomicU64,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache {
            dir: None,
            memory: Mutex::new(HashMap::new()),
            tmp_counter: AtomicU64::new(0),
        }
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(ResponseCache {
            dir: Some(dir),
            ..ResponseCache::in_memory()
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn key(backend: &str, role: Role, prompt: &str) -> String {
        let mut hasher = Sha256::new();
        hasher.update(backend.as_bytes());
        hasher.update([0x1f]);
        hasher.update(role.as_str().as_bytes());
        hasher.update([0x1f]);
        hasher.update(prompt.as_bytes());
        hex(&hasher.finalize())
    }

    pub fn get(&self, key: &str) -> Result<Option<CachedReply>> {
        if let Some(hit) = self.memory.lock().expect("cache poisoned").get(key) {
            return Ok(Some(hit.clone()));
        }
        let Some(dir) = &self.dir else {
            return Ok(None);
        };
        let path = dir.join(format!("{key}.json"));
        match std::fs::read(&path) {
            Ok(bytes) => {
                let record: CachedReply = serde_json::from_slice(&bytes)?;
                self.memory
                    .lock()
                    .expect("cache poisoned")
                    .insert(key.to_string(), record.clone());
                Ok(Some(record))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn put(&self, key: &str, record: CachedReply) -> Result<()> {
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{key}.json"));
            if !path.exists() {
                let n = self.tmp_counter.fetch_add(1, Ordering::SeqCst);
                let tmp = dir.join(format!(".{key}.{}.{n}.tmp", std::process::id()));
                let bytes = serde_json::to_vec_pretty(&record)?;
                std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
                std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
            }
        }
        self.memory
            .lock()
            .expect("cache poisoned")
            .insert(key.to_string(), record);
        Ok(())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}
