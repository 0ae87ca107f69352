//! Read-through page cache over a set of local directories.
//!
//! All bookkeeping (index, eviction order, quota, admission, in-flight
//! fetches) sits behind one mutex in [`CacheCore`] and is only held for
//! in-memory decisions. Page file I/O and remote fetches run outside it.
//! The same core drives the in-memory simulator, so a fault-free single
//! client replay and a simulation of the same trace make identical choices.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Weak};
use std::thread;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::admission::{
    admit_static, AdmissionError, AdmissionRuleSet, BucketTimeRateLimit, DatabaseRule,
    RateLimitConfig,
};
use crate::clock::{Clock, SystemClock};
use crate::eviction::{Evictor, PolicyKind};
use crate::executor::TimedExecutor;
use crate::faults::FaultInjector;
use crate::hashing::{stable_hash_seeded, unit_interval};
use crate::metadata_index::{MetadataIndex, PageMetadata};
use crate::metrics::{ErrorClass, EventKind, MetricEvent, Metrics, MetricsSnapshot, Op};
use crate::page_store::{
    DirId, FileId, PageId, PageRecord, PageStore, PageStoreError, RestoreReport, StoreLayout,
    StoreOptions, DEFAULT_BUCKET_COUNT, DEFAULT_PAGE_SIZE,
};
use crate::quota::{QuotaError, QuotaManager, QuotaRule, Verdict};
use crate::scope::Scope;

/// Attempts at a request whose backing file changes version mid-read.
const VERSION_RETRIES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirConfig {
    pub path: PathBuf,
    pub capacity_bytes: u64,
}

/// The cache configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheConfig {
    #[serde(default = "default_page_size")]
    pub page_size_bytes: u64,
    #[serde(default = "default_bucket_count")]
    pub bucket_count: u32,
    pub dirs: Vec<DirConfig>,
    #[serde(default)]
    pub eviction_policy: PolicyKind,
    /// Seeds random eviction and table-level quota eviction.
    #[serde(default)]
    pub eviction_seed: u64,
    #[serde(default = "default_read_timeout_ms")]
    pub read_timeout_ms: u64,
    #[serde(default = "default_remote_timeout_ms")]
    pub remote_timeout_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_ttl_s: Option<u64>,
    #[serde(default = "default_true")]
    pub page_checksums: bool,
    #[serde(default = "default_disk_full_fraction")]
    pub disk_full_evict_fraction: f64,
    #[serde(default = "default_timeout_threshold")]
    pub timeout_evict_threshold: u32,
    /// Static allow-list; when present only listed tables are cached.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub databases: Option<Vec<DatabaseRule>>,
    /// Access-frequency gate; when present a page is cached only after it
    /// was requested more than `threshold` times in the window.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_limit: Option<RateLimitConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub quotas: Vec<QuotaRule>,
}

fn default_page_size() -> u64 {
    DEFAULT_PAGE_SIZE
}
fn default_bucket_count() -> u32 {
    DEFAULT_BUCKET_COUNT
}
fn default_read_timeout_ms() -> u64 {
    10_000
}
fn default_remote_timeout_ms() -> u64 {
    30_000
}
fn default_true() -> bool {
    true
}
fn default_disk_full_fraction() -> f64 {
    0.05
}
fn default_timeout_threshold() -> u32 {
    3
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("at least one cache directory is required")]
    NoDirs,
    #[error("directory {0} has zero capacity")]
    ZeroCapacity(PathBuf),
    #[error("page size must be positive")]
    ZeroPageSize,
    #[error("bucket count must be positive")]
    ZeroBuckets,
    #[error("read and remote timeouts must be positive")]
    ZeroTimeout,
    #[error("disk-full eviction fraction must be in (0, 1]")]
    BadFraction,
    #[error("too many cache directories")]
    TooManyDirs,
    #[error(transparent)]
    Admission(#[from] AdmissionError),
    #[error(transparent)]
    Quota(#[from] QuotaError),
    #[error("io error reading config: {0}")]
    Io(#[from] std::io::Error),
}

impl CacheConfig {
    /// One directory, defaults everywhere else.
    pub fn single_dir(path: impl Into<PathBuf>, capacity_bytes: u64) -> Self {
        CacheConfig {
            page_size_bytes: DEFAULT_PAGE_SIZE,
            bucket_count: DEFAULT_BUCKET_COUNT,
            dirs: vec![DirConfig {
                path: path.into(),
                capacity_bytes,
            }],
            eviction_policy: PolicyKind::default(),
            eviction_seed: 0,
            read_timeout_ms: default_read_timeout_ms(),
            remote_timeout_ms: default_remote_timeout_ms(),
            default_ttl_s: None,
            page_checksums: true,
            disk_full_evict_fraction: default_disk_full_fraction(),
            timeout_evict_threshold: default_timeout_threshold(),
            databases: None,
            rate_limit: None,
            quotas: Vec::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: CacheConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.dirs.is_empty() {
            return Err(ConfigError::NoDirs);
        }
        if self.dirs.len() > usize::from(u16::MAX) {
            return Err(ConfigError::TooManyDirs);
        }
        if let Some(d) = self.dirs.iter().find(|d| d.capacity_bytes == 0) {
            return Err(ConfigError::ZeroCapacity(d.path.clone()));
        }
        if self.page_size_bytes == 0 {
            return Err(ConfigError::ZeroPageSize);
        }
        if self.bucket_count == 0 {
            return Err(ConfigError::ZeroBuckets);
        }
        if self.read_timeout_ms == 0 || self.remote_timeout_ms == 0 {
            return Err(ConfigError::ZeroTimeout);
        }
        if !(self.disk_full_evict_fraction > 0.0 && self.disk_full_evict_fraction <= 1.0) {
            return Err(ConfigError::BadFraction);
        }
        self.static_rules()?;
        QuotaManager::new(self.quotas.clone(), 0)?;
        Ok(())
    }

    fn static_rules(&self) -> Result<Option<AdmissionRuleSet>, AdmissionError> {
        self.databases
            .clone()
            .map(AdmissionRuleSet::from_databases)
            .transpose()
    }

    pub fn layout_for(&self, dir: usize) -> StoreLayout {
        StoreLayout::new(self.dirs[dir].path.clone(), self.page_size_bytes)
            .with_bucket_count(self.bucket_count)
    }

    pub fn total_capacity(&self) -> u64 {
        self.dirs.iter().map(|d| d.capacity_bytes).sum()
    }
}

/// Ranks directories for `file_id` by weighted rendezvous hashing: each
/// directory draws an exponential score scaled by its capacity and the
/// smallest wins, so a directory with k times the capacity is first for k
/// times as many files. Every page of a file gets the same ranking.
pub fn rank_dirs(file_id: &FileId, capacities: &[u64]) -> Vec<DirId> {
    let mut scored: Vec<(f64, u16)> = capacities
        .iter()
        .enumerate()
        .map(|(i, &cap)| {
            let u = unit_interval(stable_hash_seeded(file_id.as_str().as_bytes(), i as u64));
            (-u.ln() / cap as f64, i as u16)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, i)| DirId(i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CacheOutcome {
    Hit,
    MissCached,
    MissBypassed,
    Fallback,
}

impl CacheOutcome {
    /// Request-level outcome from its page outcomes.
    pub fn aggregate(pages: &[CacheOutcome]) -> CacheOutcome {
        if pages.contains(&CacheOutcome::Fallback) {
            CacheOutcome::Fallback
        } else if pages.contains(&CacheOutcome::MissCached) {
            CacheOutcome::MissCached
        } else if pages.contains(&CacheOutcome::MissBypassed) {
            CacheOutcome::MissBypassed
        } else {
            CacheOutcome::Hit
        }
    }

    fn event_kind(self) -> EventKind {
        match self {
            CacheOutcome::Hit => EventKind::Hit,
            CacheOutcome::MissCached => EventKind::MissCached,
            CacheOutcome::MissBypassed => EventKind::MissBypassed,
            CacheOutcome::Fallback => EventKind::Fallback,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileStatus {
    pub version: String,
    pub length: u64,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackingError {
    #[error("no such file: {0}")]
    NotFound(String),
    /// The requested version is no longer the one the store serves.
    #[error("{path} is no longer at version {version}")]
    VersionChanged { path: String, version: String },
    #[error("backing store unavailable: {0}")]
    Unavailable(String),
}

/// The remote store the cache fronts. Content must be immutable for a fixed
/// (path, version).
pub trait BackingStore: Send + Sync + 'static {
    fn stat(&self, path: &str) -> Result<FileStatus, BackingError>;
    fn read(
        &self,
        path: &str,
        version: &str,
        offset: u64,
        length: u64,
    ) -> Result<Vec<u8>, BackingError>;
}

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("range {offset}+{length} is outside file of {file_length} bytes")]
    InvalidRange {
        offset: u64,
        length: u64,
        file_length: u64,
    },
    #[error("backing store unavailable: {0}")]
    BackingUnavailable(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] PageStoreError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReadContext {
    pub scope: Scope,
    pub run_id: Option<String>,
}

impl ReadContext {
    pub fn scoped(scope: Scope) -> Self {
        ReadContext {
            scope,
            run_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadResult {
    pub data: Vec<u8>,
    pub outcome: CacheOutcome,
    /// One outcome per touched page, in page order.
    pub pages: Vec<CacheOutcome>,
}

/// Why a page was served without being cached.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BypassReason {
    StaticRule,
    RateLimit,
    Quota,
    NoSpace,
    /// The file moved to a newer version while this request was running.
    Stale,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Victim {
    pub page: PageId,
    pub dir: DirId,
    pub length: u64,
    pub scope: Scope,
}

impl Victim {
    fn from_meta(m: PageMetadata) -> Self {
        Victim {
            page: m.page_id,
            dir: m.dir,
            length: m.length,
            scope: m.scope,
        }
    }
}

/// A remote fetch other readers of the same page can wait on.
#[derive(Default)]
pub(crate) struct Inflight {
    done: Mutex<Option<Option<(Arc<Vec<u8>>, CacheOutcome)>>>,
    cv: Condvar,
}

impl Inflight {
    fn complete(&self, result: Option<(Arc<Vec<u8>>, CacheOutcome)>) {
        *self.done.lock() = Some(result);
        self.cv.notify_all();
    }

    /// `None` if the fetcher failed.
    fn wait(&self) -> Option<(Arc<Vec<u8>>, CacheOutcome)> {
        let mut g = self.done.lock();
        while g.is_none() {
            self.cv.wait(&mut g);
        }
        g.clone().flatten()
    }
}

pub(crate) enum Decision {
    Hit {
        dir: DirId,
    },
    Wait(Arc<Inflight>),
    /// The page is reserved in the index; fetch, write, then `commit`.
    Fetch {
        dir: DirId,
    },
    Bypass(BypassReason),
}

pub(crate) struct Access {
    pub decision: Decision,
    /// Pages dropped to make room or because they expired; delete their files.
    pub victims: Vec<Victim>,
}

/// One page access as the core sees it.
pub(crate) struct PageAccess<'a> {
    pub path: &'a str,
    pub page: &'a PageId,
    pub length: u64,
    pub scope: &'a Scope,
}

/// Every in-memory decision the cache makes.
pub(crate) struct CacheCore {
    capacities: Vec<u64>,
    default_ttl: Option<Duration>,
    timeout_threshold: u32,
    disk_full_fraction: f64,
    index: MetadataIndex,
    evictor: Evictor,
    quota: QuotaManager,
    static_rules: Option<AdmissionRuleSet>,
    rate: Option<BucketTimeRateLimit<String>>,
    /// path → file id of the version currently served.
    versions: HashMap<String, FileId>,
    inflight: HashMap<PageId, Arc<Inflight>>,
    timeouts: HashMap<PageId, u32>,
}

impl CacheCore {
    pub(crate) fn new(config: &CacheConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(CacheCore {
            capacities: config.dirs.iter().map(|d| d.capacity_bytes).collect(),
            default_ttl: config.default_ttl_s.map(Duration::from_secs),
            timeout_threshold: config.timeout_evict_threshold.max(1),
            disk_full_fraction: config.disk_full_evict_fraction,
            index: MetadataIndex::new(),
            evictor: Evictor::new(config.eviction_policy, config.eviction_seed),
            quota: QuotaManager::new(config.quotas.clone(), config.eviction_seed ^ 0x0051_574f_5441)?,
            static_rules: config.static_rules()?,
            rate: config.rate_limit.map(BucketTimeRateLimit::new),
            versions: HashMap::new(),
            inflight: HashMap::new(),
            timeouts: HashMap::new(),
        })
    }

    pub(crate) fn index(&self) -> &MetadataIndex {
        &self.index
    }

    /// Records that `path` is now served as `file_id`. Pages of the version
    /// it replaces are dropped and returned.
    pub(crate) fn observe_version(&mut self, path: &str, file_id: &FileId) -> Vec<Victim> {
        match self.versions.get(path) {
            Some(current) if current == file_id => Vec::new(),
            _ => {
                let old = self.versions.insert(path.to_string(), file_id.clone());
                old.map(|f| self.drop_file(&f)).unwrap_or_default()
            }
        }
    }

    pub(crate) fn drop_file(&mut self, file_id: &FileId) -> Vec<Victim> {
        let pages: Vec<PageId> = self
            .index
            .pages_by_file(file_id)
            .into_iter()
            .map(|m| m.page_id.clone())
            .collect();
        pages.iter().filter_map(|p| self.evict(p)).collect()
    }

    /// Drops one page from every structure.
    pub(crate) fn evict(&mut self, page: &PageId) -> Option<Victim> {
        self.evictor.remove(page);
        self.timeouts.remove(page);
        self.index.remove(page).map(Victim::from_meta)
    }

    fn unindex(&mut self, victims: Vec<(PageId, u64)>) -> Vec<Victim> {
        victims
            .into_iter()
            .filter_map(|(p, _)| {
                self.timeouts.remove(&p);
                self.index.remove(&p).map(Victim::from_meta)
            })
            .collect()
    }

    pub(crate) fn access(&mut self, req: &PageAccess<'_>, now_ms: u64) -> Access {
        let mut victims = Vec::new();
        if let Some(rate) = self.rate.as_mut() {
            rate.record_access(&req.page.to_string(), now_ms);
        }
        if let Some(meta) = self.index.get(req.page) {
            if meta.expires_at_ms().is_some_and(|t| t <= now_ms) {
                victims.extend(self.evict(req.page));
            } else {
                let dir = meta.dir;
                self.index.touch(req.page, now_ms);
                self.evictor.access(req.page);
                let decision = match self.inflight.get(req.page) {
                    Some(f) => Decision::Wait(Arc::clone(f)),
                    None => Decision::Hit { dir },
                };
                return Access { decision, victims };
            }
        }
        if let Some(f) = self.inflight.get(req.page) {
            // Reserved then evicted before its fetch finished.
            return Access {
                decision: Decision::Wait(Arc::clone(f)),
                victims,
            };
        }
        let decision = match self.admit(req, now_ms, &mut victims) {
            Ok(dir) => {
                let meta =
                    PageMetadata::new(req.page.clone(), req.length, req.scope.clone(), dir, now_ms)
                        .with_ttl(self.default_ttl);
                self.evictor.insert(req.page, meta.expires_at_ms());
                self.index.add(meta).expect("page checked absent above");
                self.inflight
                    .insert(req.page.clone(), Arc::new(Inflight::default()));
                Decision::Fetch { dir }
            }
            Err(reason) => Decision::Bypass(reason),
        };
        Access { decision, victims }
    }

    /// Admission, then quota, then placement. Victims chosen along the way
    /// are appended to `victims` even when the page ends up bypassed.
    fn admit(
        &mut self,
        req: &PageAccess<'_>,
        now_ms: u64,
        victims: &mut Vec<Victim>,
    ) -> Result<DirId, BypassReason> {
        if self.versions.get(req.path) != Some(&req.page.file_id) {
            return Err(BypassReason::Stale);
        }
        if let Some(rules) = &self.static_rules {
            if !admit_static(rules, req.scope, &self.index) {
                return Err(BypassReason::StaticRule);
            }
        }
        if let Some(rate) = &self.rate {
            if !rate.should_admit(&req.page.to_string(), now_ms) {
                return Err(BypassReason::RateLimit);
            }
        }
        loop {
            let index = &self.index;
            match self
                .quota
                .check(req.scope, req.length, &|s: &Scope| index.usage(s))
            {
                Ok(Verdict::Fits) => break,
                Ok(Verdict::Evict(demands)) => {
                    let picked =
                        self.quota
                            .select_victims(&demands[0], &self.index, &mut self.evictor);
                    if picked.is_empty() {
                        return Err(BypassReason::Quota);
                    }
                    victims.extend(self.unindex(picked));
                }
                Err(_) => return Err(BypassReason::Quota),
            }
        }
        for dir in rank_dirs(&req.page.file_id, &self.capacities) {
            let capacity = self.capacities[usize::from(dir.0)];
            if req.length > capacity {
                continue;
            }
            let used = self.index.dir_usage(dir);
            if used + req.length > capacity {
                let index = &self.index;
                let in_dir = |p: &PageId| index.get(p).is_some_and(|m| m.dir == dir);
                let length_of = |p: &PageId| index.get(p).map_or(0, |m| m.length);
                let picked = self.evictor.take_victims(
                    used + req.length - capacity,
                    Some(&in_dir),
                    &length_of,
                );
                victims.extend(self.unindex(picked));
            }
            if self.index.dir_usage(dir) + req.length <= capacity {
                return Ok(dir);
            }
        }
        Err(BypassReason::NoSpace)
    }

    /// Ends a fetch. `true` iff the reservation survived and the written
    /// page should stay.
    pub(crate) fn commit(
        &mut self,
        page: &PageId,
        result: Option<(Arc<Vec<u8>>, CacheOutcome)>,
    ) -> bool {
        if let Some(f) = self.inflight.remove(page) {
            f.complete(result);
        }
        self.index.contains(page)
    }

    /// Ends a failed fetch, releasing the reservation.
    pub(crate) fn abort(&mut self, page: &PageId, result: Option<(Arc<Vec<u8>>, CacheOutcome)>) {
        self.evict(page);
        if let Some(f) = self.inflight.remove(page) {
            f.complete(result);
        }
    }

    pub(crate) fn clear_timeouts(&mut self, page: &PageId) {
        self.timeouts.remove(page);
    }

    /// Counts a consecutive timeout; evicts the page at the threshold.
    pub(crate) fn note_timeout(&mut self, page: &PageId) -> Option<Victim> {
        let n = self.timeouts.entry(page.clone()).or_default();
        *n += 1;
        if *n >= self.timeout_threshold {
            self.evict(page)
        } else {
            None
        }
    }

    /// Early eviction after ENOSPC: a fraction of the directory's usage, at
    /// least one page, never `keep`.
    pub(crate) fn evict_for_disk_full(&mut self, dir: DirId, keep: &PageId) -> Vec<Victim> {
        let used = self.index.dir_usage(dir);
        let needed = ((used as f64 * self.disk_full_fraction).ceil() as u64).max(1);
        let index = &self.index;
        let in_dir = |p: &PageId| p != keep && index.get(p).is_some_and(|m| m.dir == dir);
        let length_of = |p: &PageId| index.get(p).map_or(0, |m| m.length);
        let picked = self.evictor.take_victims(needed, Some(&in_dir), &length_of);
        self.unindex(picked)
    }

    pub(crate) fn ttl_sweep(&mut self, now_ms: u64) -> Vec<Victim> {
        let expired = self.evictor.ttl_sweep(now_ms);
        self.unindex(expired.into_iter().map(|p| (p, 0)).collect())
    }

    /// Adds a page found on disk at startup. Pages that would overflow
    /// their directory are returned for deletion instead.
    pub(crate) fn restore_page(
        &mut self,
        record: &PageRecord,
        scope: Scope,
        now_ms: u64,
    ) -> Option<Victim> {
        let capacity = self
            .capacities
            .get(usize::from(record.dir.0))
            .copied()
            .unwrap_or(0);
        let meta = PageMetadata::new(
            record.page_id.clone(),
            record.length,
            scope,
            record.dir,
            now_ms,
        )
        .with_ttl(self.default_ttl);
        if self.index.dir_usage(record.dir) + record.length > capacity
            || self.index.contains(&record.page_id)
        {
            return Some(Victim::from_meta(meta));
        }
        self.evictor.insert(&record.page_id, meta.expires_at_ms());
        self.index.add(meta).ok();
        None
    }
}

/// Clock and fault hooks a cache runs against.
#[derive(Clone)]
pub struct CacheEnv {
    pub clock: Arc<dyn Clock>,
    pub faults: Arc<FaultInjector>,
}

impl Default for CacheEnv {
    fn default() -> Self {
        CacheEnv {
            clock: Arc::new(SystemClock),
            faults: Arc::new(FaultInjector::new()),
        }
    }
}

pub struct Cache {
    config: CacheConfig,
    core: Mutex<CacheCore>,
    stores: Vec<PageStore>,
    backing: Arc<dyn BackingStore>,
    remote: TimedExecutor,
    remote_timeout: Duration,
    metrics: Metrics,
    env: CacheEnv,
    scoped: Mutex<HashSet<(FileId, DirId)>>,
    restore_reports: Vec<RestoreReport>,
}

impl Cache {
    pub fn open(config: CacheConfig, backing: Arc<dyn BackingStore>) -> Result<Self, CacheError> {
        Self::open_in(config, backing, CacheEnv::default())
    }

    /// Opens the cache and indexes whatever pages the directories already
    /// hold.
    pub fn open_in(
        config: CacheConfig,
        backing: Arc<dyn BackingStore>,
        env: CacheEnv,
    ) -> Result<Self, CacheError> {
        let mut core = CacheCore::new(&config)?;
        let options = StoreOptions {
            checksums: config.page_checksums,
            read_timeout: Some(Duration::from_millis(config.read_timeout_ms)),
            ..StoreOptions::default()
        };
        let stores: Vec<PageStore> = (0..config.dirs.len())
            .map(|i| {
                PageStore::new(
                    config.layout_for(i),
                    DirId(i as u16),
                    options.clone(),
                    Arc::clone(&env.faults),
                )
            })
            .collect();
        let now = env.clock.now_ms();
        let mut reports = Vec::with_capacity(stores.len());
        let mut overflow = Vec::new();
        for store in &stores {
            store.ensure_layout()?;
            let report = store.restore()?;
            let mut records = report.records.clone();
            records.sort();
            for r in &records {
                let scope = report
                    .scopes
                    .get(&r.page_id.file_id)
                    .cloned()
                    .unwrap_or_default();
                overflow.extend(core.restore_page(r, scope, now));
            }
            reports.push(report);
        }
        let cache = Cache {
            remote_timeout: Duration::from_millis(config.remote_timeout_ms),
            config,
            core: Mutex::new(core),
            stores,
            backing,
            remote: TimedExecutor::new("remote-read", 16),
            metrics: Metrics::new(),
            env,
            scoped: Mutex::new(HashSet::new()),
            restore_reports: reports,
        };
        for v in &overflow {
            let _ = cache.stores[usize::from(v.dir.0)].delete_page(&v.page);
        }
        Ok(cache)
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn page_size(&self) -> u64 {
        self.config.page_size_bytes
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn snapshot(&self) -> MetricsSnapshot {
        self.metrics.snapshot()
    }

    pub fn faults(&self) -> &Arc<FaultInjector> {
        &self.env.faults
    }

    pub fn store(&self, dir: DirId) -> &PageStore {
        &self.stores[usize::from(dir.0)]
    }

    pub fn restore_reports(&self) -> &[RestoreReport] {
        &self.restore_reports
    }

    pub fn read(&self, path: &str, offset: u64, length: u64) -> Result<ReadResult, CacheError> {
        self.read_with(path, offset, length, &ReadContext::default())
    }

    /// Serves `length` bytes at `offset` of the current version of `path`.
    /// The bytes always equal what the backing store holds for one version.
    pub fn read_with(
        &self,
        path: &str,
        offset: u64,
        length: u64,
        ctx: &ReadContext,
    ) -> Result<ReadResult, CacheError> {
        let mut last_err = String::new();
        for _ in 0..VERSION_RETRIES {
            match self.try_read(path, offset, length, ctx) {
                Err(ReadAttemptError::VersionChanged(msg)) => last_err = msg,
                Err(ReadAttemptError::Fatal(e)) => return Err(e),
                Ok(r) => return Ok(r),
            }
        }
        Err(CacheError::BackingUnavailable(last_err))
    }

    fn try_read(
        &self,
        path: &str,
        offset: u64,
        length: u64,
        ctx: &ReadContext,
    ) -> Result<ReadResult, ReadAttemptError> {
        let status = self.remote_stat(path)?;
        let file_length = status.length;
        if length == 0
            || offset
                .checked_add(length)
                .is_none_or(|end| end > file_length)
        {
            return Err(ReadAttemptError::Fatal(CacheError::InvalidRange {
                offset,
                length,
                file_length,
            }));
        }
        let file_id = FileId::derive(path, &status.version);
        let victims = self.core.lock().observe_version(path, &file_id);
        self.discard(victims);

        let p = self.page_size();
        let first = offset / p;
        let last = (offset + length - 1) / p;
        let mut data = Vec::with_capacity(length as usize);
        let mut pages = Vec::with_capacity((last - first + 1) as usize);
        let file = RemoteFile {
            path,
            version: &status.version,
        };
        for idx in first..=last {
            let page_start = idx * p;
            let page_len = p.min(file_length - page_start);
            let lo = offset.max(page_start) - page_start;
            let hi = (offset + length).min(page_start + page_len) - page_start;
            let page = PageId::new(file_id.clone(), idx);
            let (bytes, outcome) = self.read_page(&file, &page, page_len, lo, hi - lo, ctx)?;
            self.metrics.record(
                MetricEvent::new(outcome.event_kind(), Op::Get, ctx.scope.clone(), hi - lo)
                    .with_run(ctx.run_id.as_deref()),
            );
            data.extend_from_slice(&bytes);
            pages.push(outcome);
        }
        Ok(ReadResult {
            data,
            outcome: CacheOutcome::aggregate(&pages),
            pages,
        })
    }

    fn read_page(
        &self,
        file: &RemoteFile<'_>,
        page: &PageId,
        page_len: u64,
        off: u64,
        len: u64,
        ctx: &ReadContext,
    ) -> Result<(Vec<u8>, CacheOutcome), ReadAttemptError> {
        let req = PageAccess {
            path: file.path,
            page,
            length: page_len,
            scope: &ctx.scope,
        };
        let slice = |b: &[u8]| b[off as usize..(off + len) as usize].to_vec();
        // A hit can race with an eviction that deletes the file; such a
        // page is simply looked up again.
        for _ in 0..3 {
            let access = self.core.lock().access(&req, self.env.clock.now_ms());
            self.discard(access.victims);
            match access.decision {
                Decision::Hit { dir } => {
                    match self
                        .store(dir)
                        .read_page_expecting(page, page_len, off, len)
                    {
                        Ok(bytes) => {
                            self.core.lock().clear_timeouts(page);
                            return Ok((bytes, CacheOutcome::Hit));
                        }
                        Err(PageStoreError::NotFound(_))
                            if !self.core.lock().index().contains(page) =>
                        {
                            continue
                        }
                        Err(e) => return self.fall_back(file, page, dir, e, off, len, ctx),
                    }
                }
                Decision::Wait(inflight) => match inflight.wait() {
                    Some((bytes, outcome)) => return Ok((slice(&bytes), outcome)),
                    None => continue,
                },
                Decision::Fetch { dir } => {
                    let page_start = page.page_index * self.page_size();
                    let bytes = match self.remote_read(file, page_start, page_len) {
                        Ok(b) => Arc::new(b),
                        Err(e) => {
                            self.core.lock().abort(page, None);
                            return Err(e);
                        }
                    };
                    let outcome = self.store_page(page, dir, &bytes, ctx);
                    return Ok((slice(&bytes), outcome));
                }
                Decision::Bypass(reason) => {
                    let kind = match reason {
                        BypassReason::StaticRule => Some(EventKind::AdmitRejectStatic),
                        BypassReason::RateLimit => Some(EventKind::AdmitRejectRate),
                        _ => None,
                    };
                    if let Some(kind) = kind {
                        self.metrics.record(
                            MetricEvent::new(kind, Op::Put, ctx.scope.clone(), page_len)
                                .with_run(ctx.run_id.as_deref()),
                        );
                    }
                    let bytes =
                        self.remote_read(file, page.page_index * self.page_size() + off, len)?;
                    return Ok((bytes, CacheOutcome::MissBypassed));
                }
            }
        }
        let bytes = self.remote_read(file, page.page_index * self.page_size() + off, len)?;
        Ok((bytes, CacheOutcome::Fallback))
    }

    /// Writes a freshly fetched page into its reserved slot. Returns the
    /// page's outcome: cached, or fallback if the local write failed.
    fn store_page(
        &self,
        page: &PageId,
        dir: DirId,
        bytes: &Arc<Vec<u8>>,
        ctx: &ReadContext,
    ) -> CacheOutcome {
        let store = self.store(dir);
        self.ensure_scope_sidecar(store, page, &ctx.scope);
        let mut result = store.write_page(page, bytes);
        if let Err(PageStoreError::DiskFull(_)) = result {
            self.record_error(Op::Put, ErrorClass::DiskFull, ctx);
            let victims = self.core.lock().evict_for_disk_full(dir, page);
            self.discard(victims);
            result = store.write_page(page, bytes);
        }
        match result {
            Ok(_) => {
                let done = Some((Arc::clone(bytes), CacheOutcome::MissCached));
                if !self.core.lock().commit(page, done) {
                    // Evicted or invalidated while the write was in flight.
                    let _ = store.delete_page_if(page, || !self.core.lock().index().contains(page));
                }
                CacheOutcome::MissCached
            }
            Err(e) => {
                if !matches!(e, PageStoreError::DiskFull(_)) {
                    self.record_error(Op::Put, ErrorClass::Io, ctx);
                } else {
                    self.record_error(Op::Put, ErrorClass::DiskFull, ctx);
                }
                self.core
                    .lock()
                    .abort(page, Some((Arc::clone(bytes), CacheOutcome::Fallback)));
                CacheOutcome::Fallback
            }
        }
    }

    fn ensure_scope_sidecar(&self, store: &PageStore, page: &PageId, scope: &Scope) {
        let key = (page.file_id.clone(), store.dir());
        if self.scoped.lock().contains(&key) {
            return;
        }
        if store.write_scope(&page.file_id, scope).is_ok() {
            self.scoped.lock().insert(key);
        }
    }

    /// Local read failed: serve from the backing store and apply the fault
    /// playbook to the page.
    #[allow(clippy::too_many_arguments)]
    fn fall_back(
        &self,
        file: &RemoteFile<'_>,
        page: &PageId,
        dir: DirId,
        err: PageStoreError,
        off: u64,
        len: u64,
        ctx: &ReadContext,
    ) -> Result<(Vec<u8>, CacheOutcome), ReadAttemptError> {
        let (class, victim) = match err {
            PageStoreError::Timeout(..) => {
                (ErrorClass::Timeout, self.core.lock().note_timeout(page))
            }
            PageStoreError::Corrupted { .. } => {
                (ErrorClass::Corrupted, self.core.lock().evict(page))
            }
            _ => (ErrorClass::Io, self.core.lock().evict(page)),
        };
        log::warn!(
            "local read of {page} in dir {} failed ({err}); serving remote",
            dir.0
        );
        self.record_error(Op::Get, class, ctx);
        self.discard(victim.into_iter().collect());
        let bytes = self.remote_read(file, page.page_index * self.page_size() + off, len)?;
        Ok((bytes, CacheOutcome::Fallback))
    }

    fn record_error(&self, op: Op, class: ErrorClass, ctx: &ReadContext) {
        self.metrics.record(
            MetricEvent::error(op, class, ctx.scope.clone()).with_run(ctx.run_id.as_deref()),
        );
    }

    /// Deletes evicted pages' files unless they were re-reserved meanwhile.
    fn discard(&self, victims: Vec<Victim>) {
        for v in victims {
            self.metrics.record(MetricEvent::new(
                EventKind::Evict,
                Op::Delete,
                v.scope.clone(),
                v.length,
            ));
            let res = self
                .store(v.dir)
                .delete_page_if(&v.page, || !self.core.lock().index().contains(&v.page));
            if let Err(e) = res {
                log::warn!("failed to delete evicted page {}: {e}", v.page);
            }
        }
    }

    fn remote_stat(&self, path: &str) -> Result<FileStatus, ReadAttemptError> {
        let backing = Arc::clone(&self.backing);
        let p = path.to_string();
        match self
            .remote
            .run(self.remote_timeout, move || backing.stat(&p))
        {
            Some(Ok(s)) => Ok(s),
            Some(Err(e)) => Err(ReadAttemptError::Fatal(CacheError::BackingUnavailable(
                e.to_string(),
            ))),
            None => Err(ReadAttemptError::Fatal(CacheError::BackingUnavailable(
                format!("stat of {path} timed out"),
            ))),
        }
    }

    fn remote_read(
        &self,
        file: &RemoteFile<'_>,
        offset: u64,
        length: u64,
    ) -> Result<Vec<u8>, ReadAttemptError> {
        let backing = Arc::clone(&self.backing);
        let (p, v) = (file.path.to_string(), file.version.to_string());
        match self.remote.run(self.remote_timeout, move || {
            backing.read(&p, &v, offset, length)
        }) {
            Some(Ok(b)) if b.len() as u64 == length => Ok(b),
            Some(Ok(b)) => Err(ReadAttemptError::Fatal(CacheError::BackingUnavailable(
                format!("short read of {}: {} of {length} bytes", file.path, b.len()),
            ))),
            Some(Err(e @ BackingError::VersionChanged { .. })) => {
                Err(ReadAttemptError::VersionChanged(e.to_string()))
            }
            Some(Err(e)) => Err(ReadAttemptError::Fatal(CacheError::BackingUnavailable(
                e.to_string(),
            ))),
            None => Err(ReadAttemptError::Fatal(CacheError::BackingUnavailable(
                format!("read of {} timed out", file.path),
            ))),
        }
    }

    /// Moves `path` to `new_version`; pages of any other version become
    /// unreachable and are removed. Returns how many were dropped.
    pub fn invalidate_file(&self, path: &str, new_version: &str) -> usize {
        let victims = self
            .core
            .lock()
            .observe_version(path, &FileId::derive(path, new_version));
        let n = victims.len();
        self.discard(victims);
        n
    }

    /// Drops every page whose TTL has passed. Returns how many.
    pub fn ttl_sweep(&self) -> usize {
        let victims = self.core.lock().ttl_sweep(self.env.clock.now_ms());
        let n = victims.len();
        self.discard(victims);
        n
    }

    /// Runs `ttl_sweep` every `period` until the handle is dropped or the
    /// cache goes away.
    pub fn start_ttl_sweeper(self: &Arc<Self>, period: Duration) -> SweeperHandle {
        let (stop_tx, stop_rx) = crossbeam_channel::bounded::<()>(0);
        let weak: Weak<Cache> = Arc::downgrade(self);
        let thread = thread::Builder::new()
            .name("ttl-sweeper".into())
            .spawn(move || loop {
                match stop_rx.recv_timeout(period) {
                    Err(crossbeam_channel::RecvTimeoutError::Timeout) => match weak.upgrade() {
                        Some(cache) => {
                            cache.ttl_sweep();
                        }
                        None => return,
                    },
                    _ => return,
                }
            })
            .expect("spawn ttl sweeper");
        SweeperHandle {
            stop: Some(stop_tx),
            thread: Some(thread),
        }
    }

    /// Directory preference for a file, best first.
    pub fn dir_ranking(&self, file_id: &FileId) -> Vec<DirId> {
        rank_dirs(file_id, &self.core.lock().capacities)
    }

    pub fn file_id(&self, path: &str) -> Option<FileId> {
        self.core.lock().versions.get(path).cloned()
    }

    pub fn contains(&self, page: &PageId) -> bool {
        self.core.lock().index.contains(page)
    }

    pub fn page_meta(&self, page: &PageId) -> Option<PageMetadata> {
        self.core.lock().index.get(page).cloned()
    }

    pub fn page_count(&self) -> usize {
        self.core.lock().index.len()
    }

    pub fn usage(&self, scope: &Scope) -> u64 {
        self.core.lock().index.usage(scope)
    }

    pub fn dir_usage(&self, dir: DirId) -> u64 {
        self.core.lock().index.dir_usage(dir)
    }

    /// Cached pages as on-disk records, for comparing with a directory scan.
    pub fn cached_pages(&self) -> std::collections::BTreeSet<PageRecord> {
        self.core
            .lock()
            .index
            .iter()
            .map(|m| PageRecord {
                page_id: m.page_id.clone(),
                length: m.length,
                dir: m.dir,
            })
            .collect()
    }

    /// Pages of `scope` (and below) currently cached.
    pub fn pages_in_scope(&self, scope: &Scope) -> Vec<PageId> {
        self.core
            .lock()
            .index
            .pages_by_scope(scope)
            .into_iter()
            .map(|m| m.page_id.clone())
            .collect()
    }

    /// Drops one page. `true` if it was cached.
    pub fn evict_page(&self, page: &PageId) -> bool {
        let v = self.core.lock().evict(page);
        let found = v.is_some();
        self.discard(v.into_iter().collect());
        found
    }

    /// Drops every cached page of `scope` and its descendants.
    pub fn evict_scope(&self, scope: &Scope) -> usize {
        let victims: Vec<Victim> = {
            let mut core = self.core.lock();
            let pages: Vec<PageId> = core
                .index
                .pages_by_scope(scope)
                .into_iter()
                .map(|m| m.page_id.clone())
                .collect();
            pages.iter().filter_map(|p| core.evict(p)).collect()
        };
        let n = victims.len();
        self.discard(victims);
        n
    }
}

pub struct SweeperHandle {
    stop: Option<crossbeam_channel::Sender<()>>,
    thread: Option<thread::JoinHandle<()>>,
}

impl Drop for SweeperHandle {
    fn drop(&mut self) {
        drop(self.stop.take());
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

struct RemoteFile<'a> {
    path: &'a str,
    version: &'a str,
}

enum ReadAttemptError {
    VersionChanged(String),
    Fatal(CacheError),
}
