use std::fs;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{Choice, ProviderError};
use crate::canonical::ContentHash;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayMode {
    Record,
    Replay,
    Passthrough,
}

impl std::str::FromStr for ReplayMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "record" => Ok(ReplayMode::Record),
            "replay" => Ok(ReplayMode::Replay),
            "passthrough" => Ok(ReplayMode::Passthrough),
            other => Err(format!("unknown replay mode `{other}`")),
        }
    }
}

/// Content-addressed archive of provider responses, one file per
/// (model, prompt, params, sample index): `<location>/<shard>/<hash>.rec`.
///
/// Files are written once via rename from a temporary file, so concurrent
/// writers of the same key leave exactly one record behind.
#[derive(Debug)]
pub struct ReplayStore {
    location: Option<PathBuf>,
    mode: ReplayMode,
    hits: AtomicUsize,
    writes: AtomicUsize,
}

#[derive(Serialize)]
struct RecordOut<'a, K: Serialize> {
    key: &'a ContentHash,
    request: &'a K,
    response: &'a Choice,
}

#[derive(Deserialize)]
struct RecordIn {
    key: ContentHash,
    response: Choice,
}

impl ReplayStore {
    pub fn open(location: &Path, mode: ReplayMode) -> Self {
        ReplayStore {
            location: (mode != ReplayMode::Passthrough).then(|| location.to_path_buf()),
            mode,
            hits: AtomicUsize::new(0),
            writes: AtomicUsize::new(0),
        }
    }

    /// No persistence; every sample goes to the provider.
    pub fn passthrough() -> Self {
        ReplayStore {
            location: None,
            mode: ReplayMode::Passthrough,
            hits: AtomicUsize::new(0),
            writes: AtomicUsize::new(0),
        }
    }

    pub fn mode(&self) -> ReplayMode {
        self.mode
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn writes(&self) -> usize {
        self.writes.load(Ordering::Relaxed)
    }

    fn path_for(&self, key: &ContentHash) -> Option<PathBuf> {
        self.location.as_ref().map(|loc| loc.join(key.shard()).join(format!("{}.rec", key.hex())))
    }

    pub fn load(&self, key: &ContentHash) -> Result<Option<Choice>, ProviderError> {
        let Some(path) = self.path_for(key) else { return Ok(None) };
        let raw = match fs::read(&path) {
            Ok(r) => r,
            Err(e) if e.kind() == ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(store_err(&path, e.to_string())),
        };
        let record: RecordIn = serde_json::from_slice(&raw).map_err(|e| store_err(&path, e.to_string()))?;
        if &record.key != key {
            return Err(store_err(&path, format!("record key {} does not match its file name", record.key)));
        }
        self.hits.fetch_add(1, Ordering::Relaxed);
        Ok(Some(record.response))
    }

    /// Persists `response` under `key` unless a record already exists.
    pub fn store<K: Serialize>(&self, key: &ContentHash, request: &K, response: &Choice) -> Result<(), ProviderError> {
        let Some(path) = self.path_for(key) else { return Ok(()) };
        if path.exists() {
            return Ok(());
        }
        let dir = path.parent().expect("sharded path has a parent");
        fs::create_dir_all(dir).map_err(|e| store_err(dir, e.to_string()))?;
        let mut bytes = serde_json::to_vec_pretty(&RecordOut { key, request, response }).expect("record serializes");
        bytes.push(b'\n');
        let tmp = dir.join(format!(".{}.{}.tmp", key.hex(), std::process::id()));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            Ok(())
        };
        write().map_err(|e| store_err(&tmp, e.to_string()))?;
        if path.exists() {
            let _ = fs::remove_file(&tmp);
            return Ok(());
        }
        fs::rename(&tmp, &path).map_err(|e| store_err(&path, e.to_string()))?;
        self.writes.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }
}

fn store_err(path: &Path, reason: String) -> ProviderError {
    ProviderError::Store { path: path.display().to_string(), reason }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canonical::content_hash;
    use crate::providers::Usage;

    fn choice(text: &str) -> Choice {
        Choice { raw_text: text.into(), finish_reason: "stop".into(), usage: Usage::default(), latency_ms: 3 }
    }

    #[test]
    fn sharded_layout_and_first_write_wins() {
        let dir = tempfile::tempdir().unwrap();
        let store = ReplayStore::open(dir.path(), ReplayMode::Record);
        let key = content_hash(b"k");
        store.store(&key, &"req", &choice("a")).unwrap();
        store.store(&key, &"req", &choice("b")).unwrap();
        let path = dir.path().join(key.shard()).join(format!("{}.rec", key.hex()));
        assert!(path.exists());
        assert_eq!(store.load(&key).unwrap().unwrap().raw_text, "a");
        assert_eq!(store.writes(), 1);
    }

    #[test]
    fn passthrough_never_touches_disk() {
        let store = ReplayStore::passthrough();
        let key = content_hash(b"k");
        store.store(&key, &"req", &choice("a")).unwrap();
        assert!(store.load(&key).unwrap().is_none());
    }

    #[test]
    fn mismatched_record_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = ReplayStore::open(dir.path(), ReplayMode::Record);
        let (k1, k2) = (content_hash(b"1"), content_hash(b"2"));
        store.store(&k1, &"req", &choice("a")).unwrap();
        let from = dir.path().join(k1.shard()).join(format!("{}.rec", k1.hex()));
        let to_dir = dir.path().join(k2.shard());
        fs::create_dir_all(&to_dir).unwrap();
        fs::copy(from, to_dir.join(format!("{}.rec", k2.hex()))).unwrap();
        assert!(store.load(&k2).is_err());
    }
}
