//! Block-oriented cache for a storage node: (block, checksum metadata) pairs
//! keyed by block id and generation stamp.
//!
//! An entry is one file directory holding the block's pages and a
//! `.blockmeta` sidecar. It is built in a staging directory and renamed into
//! place, and removed by renaming it to a trash directory first, so a reader
//! sees either the whole pair or nothing. Entries are immutable once visible.
//! The block → entry mapping lives only in memory, so the cache is wiped on
//! every open.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{self, ErrorKind, Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::admission::{BucketTimeRateLimit, RateLimitConfig};
use crate::eviction::{EvictionPolicy, OrderedPolicy};
use crate::faults::FaultInjector;
use crate::hashing::stable_hash;
use crate::page_store::{
    is_disk_full, temp_name, DirId, FileId, PageId, PageStore, StoreLayout, StoreOptions,
    BLOCK_META_SIDECAR, DEFAULT_BUCKET_COUNT, DEFAULT_PAGE_SIZE, STAGING_PREFIX, TRASH_PREFIX,
};

const KEY_STRIPES: usize = 64;
const META_VERSION: u16 = 1;
const CHECKSUM_CRC32C: u8 = 2;
const META_HEADER_LEN: usize = 7;
pub const DEFAULT_BYTES_PER_CHECKSUM: u32 = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockKey {
    pub block_id: u64,
    pub generation_stamp: u64,
}

impl BlockKey {
    pub fn new(block_id: u64, generation_stamp: u64) -> Self {
        BlockKey {
            block_id,
            generation_stamp,
        }
    }

    /// The cache file id of this (block, generation).
    pub fn cache_id(&self) -> FileId {
        FileId::derive(
            &format!("blk_{}", self.block_id),
            &self.generation_stamp.to_string(),
        )
    }
}

impl std::fmt::Display for BlockKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "blk_{}_{}", self.block_id, self.generation_stamp)
    }
}

/// Checksum metadata: a 7-byte header (version u16, checksum type u8,
/// bytes per checksum u32, all big-endian) then one big-endian CRC32C per
/// chunk of the block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMeta {
    pub bytes_per_checksum: u32,
    pub checksums: Vec<u32>,
}

impl BlockMeta {
    pub fn compute(block: &[u8], bytes_per_checksum: u32) -> Self {
        assert!(bytes_per_checksum > 0);
        BlockMeta {
            bytes_per_checksum,
            checksums: block
                .chunks(bytes_per_checksum as usize)
                .map(crc32c::crc32c)
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(META_HEADER_LEN + 4 * self.checksums.len());
        out.extend_from_slice(&META_VERSION.to_be_bytes());
        out.push(CHECKSUM_CRC32C);
        out.extend_from_slice(&self.bytes_per_checksum.to_be_bytes());
        for c in &self.checksums {
            out.extend_from_slice(&c.to_be_bytes());
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < META_HEADER_LEN {
            return Err(format!(
                "metadata is {} bytes, shorter than its header",
                bytes.len()
            ));
        }
        let version = u16::from_be_bytes([bytes[0], bytes[1]]);
        if version != META_VERSION {
            return Err(format!("unsupported metadata version {version}"));
        }
        if bytes[2] != CHECKSUM_CRC32C {
            return Err(format!("unsupported checksum type {}", bytes[2]));
        }
        let bytes_per_checksum = u32::from_be_bytes([bytes[3], bytes[4], bytes[5], bytes[6]]);
        if bytes_per_checksum == 0 {
            return Err("bytes per checksum is zero".into());
        }
        let body = &bytes[META_HEADER_LEN..];
        if !body.len().is_multiple_of(4) {
            return Err("checksum table is not a whole number of entries".into());
        }
        Ok(BlockMeta {
            bytes_per_checksum,
            checksums: body
                .chunks_exact(4)
                .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        })
    }

    fn chunks_for(&self, length: u64) -> usize {
        length.div_ceil(u64::from(self.bytes_per_checksum)) as usize
    }
}

#[derive(Debug, Error)]
pub enum BlockError {
    #[error("no space left on device")]
    DiskFull,
    #[error("caching {0} failed part way and was rolled back")]
    PartialWriteRolledBack(BlockKey),
    #[error("{key} is corrupted: {reason}")]
    Corrupted { key: BlockKey, reason: String },
    #[error("{0} is being written and cannot be cached yet")]
    UnderConstruction(BlockKey),
    #[error("invalid checksum metadata: {0}")]
    InvalidMeta(String),
    #[error("range {offset}+{length} is outside block of {block_length} bytes")]
    OutOfRange {
        offset: u64,
        length: u64,
        block_length: u64,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockCacheConfig {
    pub root: PathBuf,
    #[serde(default = "default_page_size")]
    pub page_size_bytes: u64,
    #[serde(default = "default_bucket_count")]
    pub bucket_count: u32,
    /// Evict least recently read entries beyond this many bytes.
    #[serde(default)]
    pub capacity_bytes: Option<u64>,
    /// Drop older generations of a block once a newer one is cached.
    #[serde(default)]
    pub purge_superseded: bool,
    #[serde(default)]
    pub rate_limit: Option<RateLimitConfig>,
}

fn default_page_size() -> u64 {
    DEFAULT_PAGE_SIZE
}
fn default_bucket_count() -> u32 {
    DEFAULT_BUCKET_COUNT
}

impl BlockCacheConfig {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        BlockCacheConfig {
            root: root.into(),
            page_size_bytes: DEFAULT_PAGE_SIZE,
            bucket_count: DEFAULT_BUCKET_COUNT,
            capacity_bytes: None,
            purge_superseded: false,
            rate_limit: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Entry {
    length: u64,
    meta_length: u64,
}

/// Latest cached generation of a block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMapping {
    pub cache_id: FileId,
    pub generation_stamp: u64,
    pub file_length: u64,
}

#[derive(Default)]
struct State {
    entries: HashMap<BlockKey, Entry>,
    mapping: HashMap<u64, BlockMapping>,
    generations: HashMap<u64, HashSet<u64>>,
    under_construction: HashSet<BlockKey>,
    lru: OrderedPolicy,
    by_cache_id: HashMap<FileId, BlockKey>,
    used: u64,
}

pub struct BlockCache {
    config: BlockCacheConfig,
    layout: StoreLayout,
    faults: Arc<FaultInjector>,
    state: Mutex<State>,
    key_locks: Vec<Mutex<()>>,
    rate: Option<Mutex<BucketTimeRateLimit<u64>>>,
}

impl BlockCache {
    /// Opens the cache under `config.root`, discarding anything left there.
    pub fn open(config: BlockCacheConfig) -> Result<Self, BlockError> {
        Self::open_with_faults(config, Arc::new(FaultInjector::new()))
    }

    pub fn open_with_faults(
        config: BlockCacheConfig,
        faults: Arc<FaultInjector>,
    ) -> Result<Self, BlockError> {
        let layout = StoreLayout::new(config.root.clone(), config.page_size_bytes)
            .with_bucket_count(config.bucket_count);
        let cache = BlockCache {
            rate: config
                .rate_limit
                .map(|c| Mutex::new(BucketTimeRateLimit::new(c))),
            config,
            layout,
            faults,
            state: Mutex::new(State {
                lru: OrderedPolicy::lru(),
                ..State::default()
            }),
            key_locks: (0..KEY_STRIPES).map(|_| Mutex::new(())).collect(),
        };
        cache.on_restart()?;
        Ok(cache)
    }

    pub fn layout(&self) -> &StoreLayout {
        &self.layout
    }

    fn key_lock(&self, key: &BlockKey) -> &Mutex<()> {
        let h = stable_hash(
            &[
                key.block_id.to_le_bytes(),
                key.generation_stamp.to_le_bytes(),
            ]
            .concat(),
        );
        &self.key_locks[(h % KEY_STRIPES as u64) as usize]
    }

    /// Records a read of `block_id` and says whether it is now hot enough to
    /// cache. Always true without a rate limit.
    pub fn admit(&self, block_id: u64, now_ms: u64) -> bool {
        match &self.rate {
            None => true,
            Some(rate) => {
                let mut r = rate.lock();
                r.record_access(&block_id, now_ms);
                r.should_admit(&block_id, now_ms)
            }
        }
    }

    /// Marks `key` as being written (an append in progress). It cannot be
    /// cached until `finish_write`.
    pub fn begin_write(&self, key: BlockKey) {
        self.state.lock().under_construction.insert(key);
    }

    pub fn finish_write(&self, key: BlockKey) {
        self.state.lock().under_construction.remove(&key);
    }

    /// Stores the block and its metadata under `key`, both or neither.
    /// Caching an already cached key is a no-op.
    pub fn cache_block(&self, key: BlockKey, block: &[u8], meta: &[u8]) -> Result<(), BlockError> {
        let parsed = BlockMeta::parse(meta).map_err(BlockError::InvalidMeta)?;
        if parsed.checksums.len() != parsed.chunks_for(block.len() as u64) {
            return Err(BlockError::InvalidMeta(format!(
                "{} checksums for a {}-byte block",
                parsed.checksums.len(),
                block.len()
            )));
        }
        let evicted = {
            let _g = self.key_lock(&key).lock();
            self.insert_locked(key, block, meta)?
        };
        for k in evicted {
            let _g = self.key_lock(&k).lock();
            self.remove_entry(&k)?;
        }
        Ok(())
    }

    /// Writes the entry; returns entries to evict afterwards.
    fn insert_locked(
        &self,
        key: BlockKey,
        block: &[u8],
        meta: &[u8],
    ) -> Result<Vec<BlockKey>, BlockError> {
        {
            let st = self.state.lock();
            if st.under_construction.contains(&key) {
                return Err(BlockError::UnderConstruction(key));
            }
            if st.entries.contains_key(&key) {
                return Ok(Vec::new());
            }
        }
        let cache_id = key.cache_id();
        let final_dir = self.layout.file_dir(&cache_id);
        let bucket_dir = final_dir
            .parent()
            .expect("file dir has a bucket parent")
            .to_path_buf();
        fs::create_dir_all(&bucket_dir).map_err(disk_err)?;
        let staging = bucket_dir.join(temp_name(STAGING_PREFIX, cache_id.as_str()));
        let res = self.stage(&key, &staging, block, meta);
        let res = res.and_then(|()| {
            if final_dir.exists() {
                // Left behind by an earlier crash of this process; entries
                // are immutable, so replace it.
                remove_via_trash(&final_dir)?;
            }
            fs::rename(&staging, &final_dir).map_err(disk_err)
        });
        if let Err(e) = res {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
        let mut st = self.state.lock();
        let entry = Entry {
            length: block.len() as u64,
            meta_length: meta.len() as u64,
        };
        st.entries.insert(key, entry);
        st.used += entry.length + entry.meta_length;
        st.generations
            .entry(key.block_id)
            .or_default()
            .insert(key.generation_stamp);
        st.lru.on_insert(&PageId::new(cache_id.clone(), 0));
        st.by_cache_id.insert(cache_id.clone(), key);
        let newer = st
            .mapping
            .get(&key.block_id)
            .is_none_or(|m| m.generation_stamp <= key.generation_stamp);
        if newer {
            st.mapping.insert(
                key.block_id,
                BlockMapping {
                    cache_id,
                    generation_stamp: key.generation_stamp,
                    file_length: block.len() as u64,
                },
            );
        }
        let mut evicted = Vec::new();
        if self.config.purge_superseded && newer {
            let older: Vec<u64> = st.generations[&key.block_id]
                .iter()
                .copied()
                .filter(|&g| g < key.generation_stamp)
                .collect();
            evicted.extend(older.into_iter().map(|g| BlockKey::new(key.block_id, g)));
        }
        if let Some(cap) = self.config.capacity_bytes {
            let mut used = st.used
                - evicted
                    .iter()
                    .filter_map(|k| st.entries.get(k))
                    .map(|e| e.length + e.meta_length)
                    .sum::<u64>();
            let keep = PageId::new(key.cache_id(), 0);
            while used > cap {
                let skip =
                    |p: &PageId| *p != keep && !evicted.iter().any(|k| k.cache_id() == p.file_id);
                let Some(victim) = st.lru.victims(1, Some(&skip)).pop() else {
                    break;
                };
                let vk = st.by_cache_id[&victim.file_id];
                let e = st.entries[&vk];
                used -= e.length + e.meta_length;
                evicted.push(vk);
            }
        }
        Ok(evicted)
    }

    fn stage(
        &self,
        key: &BlockKey,
        staging: &Path,
        block: &[u8],
        meta: &[u8],
    ) -> Result<(), BlockError> {
        fs::create_dir(staging).map_err(disk_err)?;
        for (i, chunk) in block.chunks(self.layout.page_size as usize).enumerate() {
            if self.faults.on_write(DirId(0)) {
                return Err(BlockError::DiskFull);
            }
            fs::write(staging.join(i.to_string()), chunk).map_err(disk_err)?;
        }
        if self.faults.on_block_meta() {
            return Err(BlockError::PartialWriteRolledBack(*key));
        }
        fs::write(staging.join(BLOCK_META_SIDECAR), meta).map_err(disk_err)?;
        Ok(())
    }

    pub fn contains(&self, key: &BlockKey) -> bool {
        self.state.lock().entries.contains_key(key)
    }

    pub fn mapping(&self, block_id: u64) -> Option<BlockMapping> {
        self.state.lock().mapping.get(&block_id).cloned()
    }

    pub fn len(&self) -> usize {
        self.state.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bytes held by cached blocks and their metadata.
    pub fn used_bytes(&self) -> u64 {
        self.state.lock().used
    }

    /// `Ok(None)` is a miss: read from the original location instead. A
    /// checksum failure evicts the entry and reports `Corrupted`.
    pub fn read_block(
        &self,
        key: &BlockKey,
        offset: u64,
        length: u64,
    ) -> Result<Option<Vec<u8>>, BlockError> {
        let Some(entry) = self.touch(key) else {
            return Ok(None);
        };
        if length == 0 || offset.checked_add(length).is_none_or(|e| e > entry.length) {
            return Err(BlockError::OutOfRange {
                offset,
                length,
                block_length: entry.length,
            });
        }
        let dir = self.layout.file_dir(&key.cache_id());
        match self.read_verified(key, &dir, entry, offset, length) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(BlockError::Io(e)) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e @ BlockError::Corrupted { .. }) => {
                log::warn!("{e}; evicting");
                let _g = self.key_lock(key).lock();
                self.remove_entry(key)?;
                Err(e)
            }
            Err(e) => Err(e),
        }
    }

    /// The whole cached (block, metadata) pair, or `None`.
    pub fn read_pair(&self, key: &BlockKey) -> Result<Option<(Vec<u8>, Vec<u8>)>, BlockError> {
        let Some(entry) = self.touch(key) else {
            return Ok(None);
        };
        let dir = self.layout.file_dir(&key.cache_id());
        let meta = match fs::read(dir.join(BLOCK_META_SIDECAR)) {
            Ok(m) => m,
            Err(e) if e.kind() == ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        if entry.length == 0 {
            return Ok(Some((Vec::new(), meta)));
        }
        match self.read_block(key, 0, entry.length)? {
            Some(block) => Ok(Some((block, meta))),
            None => Ok(None),
        }
    }

    fn touch(&self, key: &BlockKey) -> Option<Entry> {
        let mut st = self.state.lock();
        let e = st.entries.get(key).copied()?;
        st.lru.on_access(&PageId::new(key.cache_id(), 0));
        Some(e)
    }

    fn read_verified(
        &self,
        key: &BlockKey,
        dir: &Path,
        entry: Entry,
        offset: u64,
        length: u64,
    ) -> Result<Vec<u8>, BlockError> {
        let corrupted = |reason: String| BlockError::Corrupted { key: *key, reason };
        let meta_bytes = fs::read(dir.join(BLOCK_META_SIDECAR))?;
        if meta_bytes.len() as u64 != entry.meta_length {
            return Err(corrupted("metadata length changed".into()));
        }
        let meta = BlockMeta::parse(&meta_bytes).map_err(corrupted)?;
        if meta.checksums.len() != meta.chunks_for(entry.length) {
            return Err(corrupted(
                "checksum count does not match block length".into(),
            ));
        }
        let bpc = u64::from(meta.bytes_per_checksum);
        let first_chunk = offset / bpc;
        let start = first_chunk * bpc;
        let end = ((offset + length).div_ceil(bpc) * bpc).min(entry.length);
        let data = self.read_range(key, dir, entry.length, start, end - start)?;
        for (i, chunk) in data.chunks(bpc as usize).enumerate() {
            let idx = first_chunk as usize + i;
            if crc32c::crc32c(chunk) != meta.checksums[idx] {
                return Err(corrupted(format!("checksum mismatch in chunk {idx}")));
            }
        }
        let lo = (offset - start) as usize;
        Ok(data[lo..lo + length as usize].to_vec())
    }

    fn read_range(
        &self,
        key: &BlockKey,
        dir: &Path,
        block_len: u64,
        offset: u64,
        length: u64,
    ) -> Result<Vec<u8>, BlockError> {
        let p = self.layout.page_size;
        let mut out = Vec::with_capacity(length as usize);
        let end = offset + length;
        let mut pos = offset;
        while pos < end {
            let idx = pos / p;
            let page_start = idx * p;
            let page_len = p.min(block_len - page_start);
            let path = dir.join(idx.to_string());
            let mut f = fs::File::open(&path)?;
            let actual = f.metadata()?.len();
            if actual != page_len {
                return Err(BlockError::Corrupted {
                    key: *key,
                    reason: format!("page {idx} is {actual} bytes, expected {page_len}"),
                });
            }
            let take = (end.min(page_start + page_len) - pos) as usize;
            f.seek(SeekFrom::Start(pos - page_start))?;
            let before = out.len();
            out.resize(before + take, 0);
            f.read_exact(&mut out[before..])?;
            pos += take as u64;
        }
        Ok(out)
    }

    /// Drops every cached generation of `block_id` and its mapping. Returns
    /// the number of page files removed.
    pub fn delete_block(&self, block_id: u64) -> Result<u64, BlockError> {
        let gens: Vec<u64> = {
            let mut st = self.state.lock();
            st.mapping.remove(&block_id);
            st.generations
                .get(&block_id)
                .map(|g| g.iter().copied().collect())
                .unwrap_or_default()
        };
        let mut removed = 0;
        for g in gens {
            let key = BlockKey::new(block_id, g);
            let _g = self.key_lock(&key).lock();
            removed += self.remove_entry(&key)?;
        }
        Ok(removed)
    }

    /// Removes one entry; caller holds its key lock. Returns pages removed.
    fn remove_entry(&self, key: &BlockKey) -> Result<u64, BlockError> {
        let entry = {
            let mut st = self.state.lock();
            let Some(e) = st.entries.remove(key) else {
                return Ok(0);
            };
            let cache_id = key.cache_id();
            st.used -= e.length + e.meta_length;
            st.lru.on_remove(&PageId::new(cache_id.clone(), 0));
            st.by_cache_id.remove(&cache_id);
            if let Some(gens) = st.generations.get_mut(&key.block_id) {
                gens.remove(&key.generation_stamp);
                if gens.is_empty() {
                    st.generations.remove(&key.block_id);
                }
            }
            if st
                .mapping
                .get(&key.block_id)
                .is_some_and(|m| m.generation_stamp == key.generation_stamp)
            {
                st.mapping.remove(&key.block_id);
            }
            e
        };
        remove_via_trash(&self.layout.file_dir(&key.cache_id()))?;
        Ok(entry.length.div_ceil(self.layout.page_size))
    }

    /// Discards every cached block and the whole mapping.
    pub fn on_restart(&self) -> Result<(), BlockError> {
        let mut st = self.state.lock();
        let store = PageStore::new(
            self.layout.clone(),
            DirId(0),
            StoreOptions::default(),
            Arc::new(FaultInjector::new()),
        );
        store.wipe().map_err(|e| match e {
            crate::page_store::PageStoreError::Io(io) => BlockError::Io(io),
            other => BlockError::Io(io::Error::other(other.to_string())),
        })?;
        *st = State {
            lru: OrderedPolicy::lru(),
            under_construction: std::mem::take(&mut st.under_construction),
            ..State::default()
        };
        Ok(())
    }
}

fn disk_err(e: io::Error) -> BlockError {
    if is_disk_full(&e) {
        BlockError::DiskFull
    } else {
        BlockError::Io(e)
    }
}

fn remove_via_trash(dir: &Path) -> Result<(), BlockError> {
    let parent = dir.parent().unwrap_or_else(|| Path::new("."));
    let stem = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let trash = parent.join(temp_name(TRASH_PREFIX, &stem));
    match fs::rename(dir, &trash) {
        Ok(()) => {
            fs::remove_dir_all(&trash)?;
            Ok(())
        }
        Err(e) if e.kind() == ErrorKind::NotFound => Ok(()),
        Err(e) => Err(e.into()),
    }
}
