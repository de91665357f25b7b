//! Append-only on-disk cache of augmentation replies.
//!
//! One JSON record per line. A record is keyed by record kind and id, the
//! template hash, a hash of the exact model input, and the model tag, so a
//! changed description, image or model never reuses a stale reply.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub kind: String,
    pub id: String,
    pub template: String,
    pub input: String,
    pub model: String,
}

impl CacheKey {
    pub fn new(kind: &str, id: &str, template_hash: &str, input_parts: &[&[u8]], model_tag: &str) -> Self {
        let mut h = Sha256::new();
        for p in input_parts {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p);
        }
        CacheKey {
            kind: kind.to_string(),
            id: id.to_string(),
            template: template_hash.to_string(),
            input: hex::encode(&h.finalize()[..12]),
            model: model_tag.to_string(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    #[serde(flatten)]
    key: CacheKey,
    text: String,
}

#[derive(Debug, Default)]
pub struct AugmentCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<CacheKey, String>>,
    writer: Mutex<Option<File>>,
}

impl AugmentCache {
    pub fn in_memory() -> Self {
        AugmentCache::default()
    }

    /// Opens (or creates) the cache file. A torn final line from an
    /// interrupted run is skipped.
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheRecord>(&line) {
                    Ok(r) => {
                        entries.insert(r.key, r.text);
                    }
                    Err(e) => log::warn!("{}:{}: skipping unreadable cache line: {e}", path.display(), i + 1),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(AugmentCache {
            path: Some(path),
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(file)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &CacheKey) -> Option<String> {
        self.entries.read().unwrap().get(key).cloned()
    }

    pub fn put(&self, key: CacheKey, text: String) -> io::Result<()> {
        let mut writer = self.writer.lock().unwrap();
        if let Some(file) = writer.as_mut() {
            let record = CacheRecord { key: key.clone(), text: text.clone() };
            let mut line = serde_json::to_string(&record).expect("cache record serializes");
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        self.entries.write().unwrap().insert(key, text);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
