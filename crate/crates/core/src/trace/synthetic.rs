//! A backing store whose content is a pure function of (path, version,
//! offset), so any response can be checked without stored data.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::RwLock;

use super::TraceEntry;
use crate::cache_manager::{BackingError, BackingStore, FileStatus};
use crate::hashing::{mix64, stable_hash_seeded};

pub const INITIAL_VERSION: &str = "1";

/// File sizes implied by a trace: each file is exactly as long as its
/// furthest read.
pub fn file_sizes(entries: &[TraceEntry]) -> HashMap<String, u64> {
    let mut sizes: HashMap<String, u64> = HashMap::new();
    for e in entries {
        let end = e.offset + e.length;
        let s = sizes.entry(e.file_id.clone()).or_default();
        *s = (*s).max(end);
    }
    sizes
}

#[derive(Debug)]
pub struct SyntheticStore {
    seed: u64,
    files: RwLock<HashMap<String, (String, u64)>>,
    bytes_read: AtomicU64,
    reads: AtomicU64,
}

impl SyntheticStore {
    pub fn new(seed: u64) -> Self {
        SyntheticStore {
            seed,
            files: RwLock::new(HashMap::new()),
            bytes_read: AtomicU64::new(0),
            reads: AtomicU64::new(0),
        }
    }

    pub fn for_trace(entries: &[TraceEntry], seed: u64) -> Self {
        let store = Self::new(seed);
        for (path, size) in file_sizes(entries) {
            store.add_file(&path, size);
        }
        store
    }

    pub fn add_file(&self, path: &str, size: u64) {
        self.files
            .write()
            .insert(path.to_string(), (INITIAL_VERSION.to_string(), size));
    }

    /// Moves `path` to a new version with the same size. Returns it.
    pub fn bump_version(&self, path: &str) -> Option<String> {
        let mut files = self.files.write();
        let entry = files.get_mut(path)?;
        let next = entry.0.parse::<u64>().map_or(1, |v| v + 1).to_string();
        entry.0 = next.clone();
        Some(next)
    }

    pub fn version(&self, path: &str) -> Option<String> {
        self.files.read().get(path).map(|(v, _)| v.clone())
    }

    /// Total bytes served by `read`.
    pub fn bytes_read(&self) -> u64 {
        self.bytes_read.load(Ordering::Relaxed)
    }

    pub fn read_count(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    /// The content function.
    pub fn content(&self, path: &str, version: &str, offset: u64, length: u64) -> Vec<u8> {
        let key = stable_hash_seeded(format!("{path}\0{version}").as_bytes(), self.seed);
        let mut out = Vec::with_capacity(length as usize);
        let end = offset + length;
        let mut word = offset / 8;
        while word * 8 < end {
            let bytes = mix64(key ^ mix64(word)).to_le_bytes();
            let lo = offset.max(word * 8) - word * 8;
            let hi = end.min(word * 8 + 8) - word * 8;
            out.extend_from_slice(&bytes[lo as usize..hi as usize]);
            word += 1;
        }
        out
    }
}

impl BackingStore for SyntheticStore {
    fn stat(&self, path: &str) -> Result<FileStatus, BackingError> {
        self.files
            .read()
            .get(path)
            .map(|(version, length)| FileStatus {
                version: version.clone(),
                length: *length,
            })
            .ok_or_else(|| BackingError::NotFound(path.to_string()))
    }

    fn read(&self, path: &str, version: &str, offset: u64, length: u64) -> Result<Vec<u8>, BackingError> {
        let (current, size) = self
            .files
            .read()
            .get(path)
            .cloned()
            .ok_or_else(|| BackingError::NotFound(path.to_string()))?;
        if current != version {
            return Err(BackingError::VersionChanged {
                path: path.to_string(),
                version: version.to_string(),
            });
        }
        if offset + length > size {
            return Err(BackingError::Unavailable(format!(
                "read {offset}+{length} past end of {path} ({size} bytes)"
            )));
        }
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.bytes_read.fetch_add(length, Ordering::Relaxed);
        Ok(self.content(path, version, offset, length))
    }
}
