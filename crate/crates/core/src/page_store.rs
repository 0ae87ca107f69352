//! Pages as individual files under a fixed directory hierarchy.
//!
//! Layout (format v1):
//!
//! ```text
//! <root>/page_size=<bytes>/bucket_<b>/<file_id>/<page_index>
//! ```
//!
//! where `b = stable_hash(file_id) mod bucket_count` and `file_id` is
//! lowercase hex. A page file holds raw page bytes and nothing else, so a
//! page's identity and length are recoverable from its path and size alone.
//! Files starting with `.` inside a file directory are sidecars (scope tag,
//! optional CRC32C, block metadata) and never count as pages.
//!
//! Writes go to a temporary name in the target directory and are renamed into
//! place, so readers see either nothing or the complete page.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::{self, File};
use std::io::{self, ErrorKind, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::executor::TimedExecutor;
use crate::faults::FaultInjector;
use crate::hashing::{stable_hash, stable_hash128};
use crate::scope::Scope;

pub const DEFAULT_PAGE_SIZE: u64 = 1 << 20;
pub const DEFAULT_BUCKET_COUNT: u32 = 1000;

const PAGE_SIZE_PREFIX: &str = "page_size=";
const BUCKET_PREFIX: &str = "bucket_";
const TEMP_PREFIX: &str = ".tmp-";
pub(crate) const STAGING_PREFIX: &str = ".staging-";
pub(crate) const TRASH_PREFIX: &str = ".trash-";
pub(crate) const SCOPE_SIDECAR: &str = ".scope";
pub(crate) const BLOCK_META_SIDECAR: &str = ".blockmeta";
const CRC_SUFFIX: &str = ".crc32c";
const LOCK_STRIPES: usize = 64;

/// Opaque, stable identifier of one version of one file, as lowercase hex.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FileId(String);

impl FileId {
    /// Derives the id from the file's full path and a version token (for
    /// example its modification time). A new version yields a new id, so stale
    /// pages become unreachable instead of needing in-place invalidation.
    pub fn derive(path: &str, version: &str) -> Self {
        let mut key = Vec::with_capacity(path.len() + version.len() + 1);
        key.extend_from_slice(path.as_bytes());
        key.push(0);
        key.extend_from_slice(version.as_bytes());
        FileId(format!("{:032x}", stable_hash128(&key)))
    }

    /// Accepts an existing id; must be non-empty lowercase hex.
    pub fn from_hex(s: &str) -> Option<Self> {
        if !s.is_empty()
            && s.len() <= 64
            && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
        {
            Some(FileId(s.to_string()))
        } else {
            None
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for FileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PageId {
    pub file_id: FileId,
    pub page_index: u64,
}

impl PageId {
    pub fn new(file_id: FileId, page_index: u64) -> Self {
        PageId {
            file_id,
            page_index,
        }
    }

    /// The page holding byte `offset` of the file.
    pub fn for_offset(file_id: FileId, offset: u64, page_size: u64) -> Self {
        PageId::new(file_id, offset / page_size)
    }
}

impl fmt::Display for PageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.file_id, self.page_index)
    }
}

/// Index of a cache directory within the cache configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DirId(pub u16);

impl fmt::Display for DirId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreLayout {
    pub root: PathBuf,
    pub page_size: u64,
    pub bucket_count: u32,
}

impl StoreLayout {
    pub fn new(root: impl Into<PathBuf>, page_size: u64) -> Self {
        StoreLayout {
            root: root.into(),
            page_size,
            bucket_count: DEFAULT_BUCKET_COUNT,
        }
    }

    pub fn with_bucket_count(mut self, bucket_count: u32) -> Self {
        self.bucket_count = bucket_count;
        self
    }

    pub fn page_size_dir(&self) -> PathBuf {
        self.root
            .join(format!("{PAGE_SIZE_PREFIX}{}", self.page_size))
    }

    pub fn bucket_of(&self, file_id: &FileId) -> u32 {
        (stable_hash(file_id.as_str().as_bytes()) % u64::from(self.bucket_count)) as u32
    }

    pub fn bucket_dir(&self, bucket: u32) -> PathBuf {
        self.page_size_dir()
            .join(format!("{BUCKET_PREFIX}{bucket}"))
    }

    pub fn file_dir(&self, file_id: &FileId) -> PathBuf {
        self.bucket_dir(self.bucket_of(file_id))
            .join(file_id.as_str())
    }

    /// Pure: identical inputs give identical paths in every process.
    pub fn path_for(&self, page_id: &PageId) -> PathBuf {
        self.file_dir(&page_id.file_id)
            .join(page_id.page_index.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PageRecord {
    pub page_id: PageId,
    pub length: u64,
    pub dir: DirId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedEntry {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct RestoreReport {
    pub records: Vec<PageRecord>,
    pub skipped: Vec<SkippedEntry>,
    /// Scope tags found next to restored files.
    pub scopes: HashMap<FileId, Scope>,
}

#[derive(Debug, thiserror::Error)]
pub enum PageStoreError {
    #[error("no space left on device in cache dir {0}")]
    DiskFull(DirId),
    #[error("page {0} not found")]
    NotFound(PageId),
    #[error("local read of page {0} timed out after {1:?}")]
    Timeout(PageId, Duration),
    #[error("page {page} is corrupted: {reason}")]
    Corrupted { page: PageId, reason: String },
    #[error("store holds pages of size {found}, configured page size is {expected}")]
    PageSizeMismatch { found: u64, expected: u64 },
    #[error("page length {length} not in 1..={page_size}")]
    InvalidLength { length: u64, page_size: u64 },
    #[error("range {offset}+{length} exceeds stored page length {stored}")]
    OutOfRange {
        offset: u64,
        length: u64,
        stored: u64,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub(crate) fn is_disk_full(e: &io::Error) -> bool {
    e.kind() == ErrorKind::StorageFull
        || e.kind() == ErrorKind::QuotaExceeded
        || e.raw_os_error() == Some(28)
}

#[derive(Debug, Clone)]
pub struct StoreOptions {
    /// Write a CRC32C sidecar per page and verify it on read.
    pub checksums: bool,
    /// Deadline for local page reads; `None` reads inline.
    pub read_timeout: Option<Duration>,
    pub reader_threads: usize,
}

impl Default for StoreOptions {
    fn default() -> Self {
        StoreOptions {
            checksums: false,
            read_timeout: None,
            reader_threads: 8,
        }
    }
}

struct Inner {
    layout: StoreLayout,
    dir: DirId,
    checksums: bool,
    faults: Arc<FaultInjector>,
    locks: Vec<RwLock<()>>,
}

/// One cache directory's worth of page files.
///
/// Writers and deleters of the same page serialize on a striped lock; readers
/// take no lock and rely on rename atomicity.
#[derive(Clone)]
pub struct PageStore {
    inner: Arc<Inner>,
    read_timeout: Option<Duration>,
    reader: Option<Arc<TimedExecutor>>,
}

static TEMP_NONCE: AtomicU64 = AtomicU64::new(0);

pub(crate) fn temp_name(prefix: &str, stem: &str) -> String {
    format!(
        "{prefix}{stem}-{}-{}",
        std::process::id(),
        TEMP_NONCE.fetch_add(1, Ordering::Relaxed)
    )
}

/// Writes `bytes` to `dest` via a temp file in the same directory.
pub(crate) fn write_atomic(dest: &Path, bytes: &[u8]) -> io::Result<()> {
    let parent = dest.parent().unwrap_or_else(|| Path::new("."));
    let stem = dest
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = parent.join(temp_name(TEMP_PREFIX, &stem));
    let res = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        fs::rename(&tmp, dest)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    res
}

impl PageStore {
    pub fn new(
        layout: StoreLayout,
        dir: DirId,
        options: StoreOptions,
        faults: Arc<FaultInjector>,
    ) -> Self {
        let reader = options
            .read_timeout
            .map(|_| Arc::new(TimedExecutor::new("page-read", options.reader_threads)));
        PageStore {
            inner: Arc::new(Inner {
                layout,
                dir,
                checksums: options.checksums,
                faults,
                locks: (0..LOCK_STRIPES).map(|_| RwLock::new(())).collect(),
            }),
            read_timeout: options.read_timeout,
            reader,
        }
    }

    pub fn layout(&self) -> &StoreLayout {
        &self.inner.layout
    }

    pub fn dir(&self) -> DirId {
        self.inner.dir
    }

    pub fn path_for(&self, page_id: &PageId) -> PathBuf {
        self.inner.layout.path_for(page_id)
    }

    /// Creates the `page_size=` folder.
    pub fn ensure_layout(&self) -> Result<(), PageStoreError> {
        fs::create_dir_all(self.inner.layout.page_size_dir())?;
        Ok(())
    }

    pub fn write_page(&self, page_id: &PageId, data: &[u8]) -> Result<PageRecord, PageStoreError> {
        let inner = &*self.inner;
        let length = data.len() as u64;
        if length == 0 || length > inner.layout.page_size {
            return Err(PageStoreError::InvalidLength {
                length,
                page_size: inner.layout.page_size,
            });
        }
        let _guard = inner.stripe(page_id).write();
        if inner.faults.on_write(inner.dir) {
            return Err(PageStoreError::DiskFull(inner.dir));
        }
        let dest = inner.layout.path_for(page_id);
        let map_err = |e: io::Error| {
            if is_disk_full(&e) {
                PageStoreError::DiskFull(inner.dir)
            } else {
                PageStoreError::Io(e)
            }
        };
        fs::create_dir_all(dest.parent().expect("page path has a parent")).map_err(map_err)?;
        if inner.checksums {
            let crc = crc32c::crc32c(data);
            write_atomic(&crc_path(&dest), &crc.to_le_bytes()).map_err(map_err)?;
        } else {
            // A stale sidecar from an earlier checksummed write would fail verification.
            let _ = fs::remove_file(crc_path(&dest));
        }
        write_atomic(&dest, data).map_err(map_err)?;
        Ok(PageRecord {
            page_id: page_id.clone(),
            length,
            dir: inner.dir,
        })
    }

    /// Reads `length` bytes at `offset` within the page, bounded by the read
    /// timeout when one is configured.
    pub fn read_page(
        &self,
        page_id: &PageId,
        offset: u64,
        length: u64,
    ) -> Result<Vec<u8>, PageStoreError> {
        self.read_timed(page_id, None, offset, length)
    }

    /// Like [`read_page`](Self::read_page), but treats any on-disk length other
    /// than `expected_len` as corruption.
    pub fn read_page_expecting(
        &self,
        page_id: &PageId,
        expected_len: u64,
        offset: u64,
        length: u64,
    ) -> Result<Vec<u8>, PageStoreError> {
        self.read_timed(page_id, Some(expected_len), offset, length)
    }

    fn read_timed(
        &self,
        page_id: &PageId,
        expected: Option<u64>,
        offset: u64,
        length: u64,
    ) -> Result<Vec<u8>, PageStoreError> {
        match (&self.reader, self.read_timeout) {
            (Some(reader), Some(timeout)) => {
                let inner = Arc::clone(&self.inner);
                let id = page_id.clone();
                reader
                    .run(timeout, move || inner.read(&id, expected, offset, length))
                    .unwrap_or_else(|| Err(PageStoreError::Timeout(page_id.clone(), timeout)))
            }
            _ => self.inner.read(page_id, expected, offset, length),
        }
    }

    /// Idempotent; `true` iff a page file was removed.
    pub fn delete_page(&self, page_id: &PageId) -> Result<bool, PageStoreError> {
        let _guard = self.inner.stripe(page_id).write();
        self.delete_unlocked(page_id)
    }

    /// Deletes the page only if `still_wanted` says nobody re-created it in
    /// the meantime. The check runs under the page's write lock.
    pub(crate) fn delete_page_if(
        &self,
        page_id: &PageId,
        still_unwanted: impl FnOnce() -> bool,
    ) -> Result<bool, PageStoreError> {
        let _guard = self.inner.stripe(page_id).write();
        if !still_unwanted() {
            return Ok(false);
        }
        self.delete_unlocked(page_id)
    }

    fn delete_unlocked(&self, page_id: &PageId) -> Result<bool, PageStoreError> {
        let path = self.inner.layout.path_for(page_id);
        let _ = fs::remove_file(crc_path(&path));
        match fs::remove_file(&path) {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(false),
            Err(e) => Err(e.into()),
        }
    }

    /// Tags a file directory with the scope its pages belong to, so the scope
    /// survives a restart.
    pub fn write_scope(&self, file_id: &FileId, scope: &Scope) -> Result<(), PageStoreError> {
        let dir = self.inner.layout.file_dir(file_id);
        fs::create_dir_all(&dir)?;
        write_atomic(&dir.join(SCOPE_SIDECAR), scope.to_string().as_bytes())?;
        Ok(())
    }

    /// Removes every page file, sidecar and leftover below the `page_size=`
    /// folder, keeping the folder itself.
    pub fn wipe(&self) -> Result<(), PageStoreError> {
        let top = self.inner.layout.page_size_dir();
        match fs::read_dir(&top) {
            Ok(entries) => {
                for entry in entries {
                    let entry = entry?;
                    let path = entry.path();
                    if entry.file_type()?.is_dir() {
                        fs::remove_dir_all(&path)?;
                    } else {
                        fs::remove_file(&path)?;
                    }
                }
            }
            Err(e) if e.kind() == ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        fs::create_dir_all(&top)?;
        Ok(())
    }

    /// Rebuilds the page list from the directory tree alone.
    ///
    /// Fails with `PageSizeMismatch` if the root was written with another page
    /// size. Malformed entries are reported and left alone; interrupted-write
    /// temporaries are reported and removed.
    pub fn restore(&self) -> Result<RestoreReport, PageStoreError> {
        let layout = &self.inner.layout;
        let mut report = RestoreReport::default();
        let root_entries = match fs::read_dir(&layout.root) {
            Ok(e) => e,
            Err(e) if e.kind() == ErrorKind::NotFound => return Ok(report),
            Err(e) => return Err(e.into()),
        };
        let mut found_ours = false;
        for entry in root_entries {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(size) = name.strip_prefix(PAGE_SIZE_PREFIX) {
                match size.parse::<u64>() {
                    Ok(s) if s == layout.page_size => found_ours = true,
                    Ok(s) => {
                        return Err(PageStoreError::PageSizeMismatch {
                            found: s,
                            expected: layout.page_size,
                        })
                    }
                    Err(_) => report.skip(entry.path(), "unparsable page_size folder"),
                }
            } else {
                report.skip(entry.path(), "not a page_size folder");
            }
        }
        if !found_ours {
            return Ok(report);
        }
        for bucket in fs::read_dir(layout.page_size_dir())? {
            let bucket = bucket?;
            let name = bucket.file_name().to_string_lossy().into_owned();
            let b = name
                .strip_prefix(BUCKET_PREFIX)
                .and_then(parse_decimal)
                .filter(|&b| b < u64::from(layout.bucket_count));
            match b {
                Some(b) if bucket.file_type()?.is_dir() => {
                    self.restore_bucket(b as u32, &bucket.path(), &mut report)?
                }
                _ => report.skip(bucket.path(), "not a bucket folder"),
            }
        }
        report.records.sort();
        Ok(report)
    }

    fn restore_bucket(
        &self,
        bucket: u32,
        path: &Path,
        report: &mut RestoreReport,
    ) -> Result<(), PageStoreError> {
        let layout = &self.inner.layout;
        for entry in fs::read_dir(path)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let epath = entry.path();
            if name.starts_with(STAGING_PREFIX) || name.starts_with(TRASH_PREFIX) {
                report.skip(epath.clone(), "interrupted staging directory removed");
                let _ = fs::remove_dir_all(&epath);
                continue;
            }
            let file_id = match FileId::from_hex(&name) {
                Some(id) if entry.file_type()?.is_dir() => id,
                _ => {
                    report.skip(epath, "not a file id directory");
                    continue;
                }
            };
            if layout.bucket_of(&file_id) != bucket {
                report.skip(epath, "file id hashed to a different bucket");
                continue;
            }
            for leaf in fs::read_dir(&epath)? {
                let leaf = leaf?;
                let leaf_name = leaf.file_name().to_string_lossy().into_owned();
                let leaf_path = leaf.path();
                if leaf_name == SCOPE_SIDECAR {
                    match fs::read_to_string(&leaf_path)
                        .ok()
                        .and_then(|s| s.parse::<Scope>().ok())
                    {
                        Some(scope) => {
                            report.scopes.insert(file_id.clone(), scope);
                        }
                        None => report.skip(leaf_path, "unreadable scope tag"),
                    }
                    continue;
                }
                if leaf_name.starts_with(TEMP_PREFIX) {
                    report.skip(leaf_path.clone(), "interrupted write removed");
                    let _ = fs::remove_file(&leaf_path);
                    continue;
                }
                if leaf_name.starts_with('.') || leaf_name.ends_with(CRC_SUFFIX) {
                    continue;
                }
                let index = match parse_decimal(&leaf_name) {
                    Some(i) if leaf.file_type()?.is_file() => i,
                    _ => {
                        report.skip(leaf_path, "not a page file");
                        continue;
                    }
                };
                let length = leaf.metadata()?.len();
                if length == 0 || length > layout.page_size {
                    report.skip(leaf_path, "page length out of range");
                    continue;
                }
                report.records.push(PageRecord {
                    page_id: PageId::new(file_id.clone(), index),
                    length,
                    dir: self.inner.dir,
                });
            }
        }
        Ok(())
    }

    /// Page files currently present below this store, by walking the tree.
    /// Unlike [`restore`](Self::restore) this never modifies the tree.
    pub fn scan_pages(&self) -> Result<BTreeSet<PageRecord>, PageStoreError> {
        let mut out = BTreeSet::new();
        let top = self.inner.layout.page_size_dir();
        if !top.exists() {
            return Ok(out);
        }
        for bucket in fs::read_dir(top)? {
            let bucket = bucket?;
            if !bucket.file_type()?.is_dir() {
                continue;
            }
            for fdir in fs::read_dir(bucket.path())? {
                let fdir = fdir?;
                let Some(file_id) = FileId::from_hex(&fdir.file_name().to_string_lossy()) else {
                    continue;
                };
                if !fdir.file_type()?.is_dir() {
                    continue;
                }
                for leaf in fs::read_dir(fdir.path())? {
                    let leaf = leaf?;
                    if let Some(i) = parse_decimal(&leaf.file_name().to_string_lossy()) {
                        out.insert(PageRecord {
                            page_id: PageId::new(file_id.clone(), i),
                            length: leaf.metadata()?.len(),
                            dir: self.inner.dir,
                        });
                    }
                }
            }
        }
        Ok(out)
    }
}

impl Inner {
    fn stripe(&self, page_id: &PageId) -> &RwLock<()> {
        let h = stable_hash(page_id.file_id.as_str().as_bytes())
            ^ page_id.page_index.wrapping_mul(0x9e37_79b9);
        &self.locks[(h % LOCK_STRIPES as u64) as usize]
    }

    fn read(
        &self,
        page_id: &PageId,
        expected: Option<u64>,
        offset: u64,
        length: u64,
    ) -> Result<Vec<u8>, PageStoreError> {
        if let Some(stall) = self.faults.on_read(page_id) {
            thread::sleep(stall);
        }
        let path = self.layout.path_for(page_id);
        let mut file = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == ErrorKind::NotFound => {
                return Err(PageStoreError::NotFound(page_id.clone()))
            }
            Err(e) => return Err(e.into()),
        };
        let stored = file.metadata()?.len();
        if let Some(exp) = expected {
            if stored != exp {
                return Err(PageStoreError::Corrupted {
                    page: page_id.clone(),
                    reason: format!("length {stored} on disk, expected {exp}"),
                });
            }
        }
        let end = offset.saturating_add(length);
        if end > stored {
            return Err(PageStoreError::OutOfRange {
                offset,
                length,
                stored,
            });
        }
        let corrupted = |reason: String| PageStoreError::Corrupted {
            page: page_id.clone(),
            reason,
        };
        if self.checksums {
            if let Ok(sidecar) = fs::read(crc_path(&path)) {
                let mut all = Vec::with_capacity(stored as usize);
                file.read_to_end(&mut all)?;
                let want = <[u8; 4]>::try_from(sidecar.as_slice())
                    .map(u32::from_le_bytes)
                    .map_err(|_| corrupted("malformed checksum sidecar".into()))?;
                let got = crc32c::crc32c(&all);
                if got != want || all.len() as u64 != stored {
                    return Err(corrupted(format!("crc32c {got:08x}, expected {want:08x}")));
                }
                return Ok(all[offset as usize..end as usize].to_vec());
            }
        }
        file.seek(SeekFrom::Start(offset))?;
        let mut buf = vec![0u8; length as usize];
        match file.read_exact(&mut buf) {
            Ok(()) => Ok(buf),
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => Err(corrupted("short read".into())),
            Err(e) => Err(e.into()),
        }
    }
}

impl RestoreReport {
    fn skip(&mut self, path: PathBuf, reason: &str) {
        log::warn!("restore: skipping {}: {reason}", path.display());
        self.skipped.push(SkippedEntry {
            path,
            reason: reason.to_string(),
        });
    }
}

fn crc_path(page: &Path) -> PathBuf {
    let mut name = page.file_name().unwrap_or_default().to_os_string();
    name.push(CRC_SUFFIX);
    page.with_file_name(name)
}

/// Canonical decimal: digits only, no leading zeros except "0" itself.
fn parse_decimal(s: &str) -> Option<u64> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || (s.len() > 1 && s.starts_with('0'))
    {
        return None;
    }
    s.parse().ok()
}
