//! Append-only JSON-lines response store keyed by request fingerprint.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheEntry {
    pub fingerprint: String,
    pub request: Value,
    pub response: Value,
    pub timestamp: String,
}

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("cache file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt cache file {path} at line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Drop bytes after the last newline.
pub(crate) fn truncate_torn_tail(path: &Path) -> std::io::Result<()> {
    let data = std::fs::read(path)?;
    if data.is_empty() || data.last() == Some(&b'\n') {
        return Ok(());
    }
    let keep = data.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
    tracing::warn!(path = %path.display(), dropped = data.len() - keep, "truncating torn final line");
    OpenOptions::new()
        .write(true)
        .open(path)?
        .set_len(keep as u64)
}

struct Inner {
    entries: HashMap<String, Value>,
    file: Option<File>,
}

/// Shared by the chat client and both oracle clients. Safe for concurrent
/// use; writing the same fingerprint twice keeps the first response.
pub struct ResponseCache {
    path: Option<PathBuf>,
    inner: Mutex<Inner>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl std::fmt::Debug for ResponseCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ResponseCache")
            .field("path", &self.path)
            .field("len", &self.len())
            .finish()
    }
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            inner: Mutex::new(Inner {
                entries: HashMap::new(),
                file: None,
            }),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    /// Open or create the store at `path`. A torn final line left by a crash
    /// during append is cut off; corruption elsewhere is an error.
    pub fn open(path: &Path) -> Result<Self, CacheError> {
        let io_err = |source| CacheError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
        if path.exists() {
            truncate_torn_tail(path).map_err(io_err)?;
        }
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io_err)?);
            for (idx, line) in reader.lines().enumerate() {
                let line = line.map_err(io_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheEntry =
                    serde_json::from_str(&line).map_err(|e| CacheError::Corrupt {
                        path: path.to_path_buf(),
                        line: idx + 1,
                        message: e.to_string(),
                    })?;
                entries.entry(entry.fingerprint).or_insert(entry.response);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err)?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            inner: Mutex::new(Inner {
                entries,
                file: Some(file),
            }),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, fingerprint: &str) -> Option<Value> {
        let found = self
            .inner
            .lock()
            .expect("cache lock poisoned")
            .entries
            .get(fingerprint)
            .cloned();
        match found {
            Some(_) => self.hits.fetch_add(1, Ordering::Relaxed),
            None => self.misses.fetch_add(1, Ordering::Relaxed),
        };
        found
    }

    pub fn put(
        &self,
        fingerprint: &str,
        request: Value,
        response: Value,
    ) -> Result<(), CacheError> {
        let mut inner = self.inner.lock().expect("cache lock poisoned");
        if inner.entries.contains_key(fingerprint) {
            return Ok(());
        }
        if let Some(file) = inner.file.as_mut() {
            let entry = CacheEntry {
                fingerprint: fingerprint.to_string(),
                request,
                response: response.clone(),
                timestamp: chrono::Utc::now().to_rfc3339(),
            };
            let mut line = serde_json::to_vec(&entry).expect("cache entries serialize");
            line.push(b'\n');
            let path = self.path.clone().unwrap_or_default();
            file.write_all(&line)
                .and_then(|_| file.flush())
                .map_err(|source| CacheError::Io { path, source })?;
        }
        inner.entries.insert(fingerprint.to_string(), response);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inner
            .lock()
            .expect("cache lock poisoned")
            .entries
            .len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }
}
