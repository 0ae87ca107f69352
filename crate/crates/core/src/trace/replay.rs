//! Replays a trace against a real on-disk cache backed by the synthetic
//! store, checking every response byte and optionally injecting faults.

use std::fs;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::simulate::outcome_code;
use super::synthetic::SyntheticStore;
use super::TraceEntry;
use crate::cache_manager::{BackingStore, Cache, CacheConfig, CacheEnv, CacheError, CacheOutcome, ReadContext};
use crate::clock::ManualClock;
use crate::faults::FaultInjector;
use crate::metrics::{ErrorClass, MetricsSnapshot};
use crate::page_store::{DirId, FileId, PageId, PageStore, StoreOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaultKind {
    /// Stall the next local read of a cached page (param: milliseconds).
    Hang,
    /// Damage a cached page file on disk (param: "flip" or "truncate").
    Corrupt,
    /// Fail page writes with ENOSPC (param: how many; target: dir index).
    Enospc,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FaultParam {
    Number(u64),
    Text(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptMode {
    Flip,
    Truncate,
}

/// One scheduled fault. Hang and corrupt faults wait until a request at or
/// after `at_request_index` touches a page that is cached (and whose file
/// matches `target`, if given), then hit that page.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub at_request_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    pub kind: FaultKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param: Option<FaultParam>,
}

impl FaultSpec {
    pub fn new(at_request_index: usize, kind: FaultKind) -> Self {
        FaultSpec {
            at_request_index,
            target: None,
            kind,
            param: None,
        }
    }

    pub fn with_param(mut self, param: FaultParam) -> Self {
        self.param = Some(param);
        self
    }

    fn number(&self) -> Option<u64> {
        match &self.param {
            Some(FaultParam::Number(n)) => Some(*n),
            Some(FaultParam::Text(t)) => t.parse().ok(),
            None => None,
        }
    }

    fn corrupt_mode(&self) -> Result<CorruptMode, String> {
        match &self.param {
            None => Ok(CorruptMode::Flip),
            Some(FaultParam::Text(t)) if t == "flip" => Ok(CorruptMode::Flip),
            Some(FaultParam::Text(t)) if t == "truncate" => Ok(CorruptMode::Truncate),
            Some(p) => Err(format!("unknown corrupt mode {p:?}")),
        }
    }

    /// Parses a JSON list of fault specs.
    pub fn list_from_json(text: &str) -> Result<Vec<FaultSpec>, String> {
        let list: Vec<FaultSpec> = serde_json::from_str(text).map_err(|e| e.to_string())?;
        for f in &list {
            if f.kind == FaultKind::Corrupt {
                f.corrupt_mode()?;
            }
        }
        Ok(list)
    }
}

#[derive(Debug, Clone)]
pub struct ReplayOptions {
    pub workers: usize,
    pub faults: Vec<FaultSpec>,
    /// Seeds the synthetic content.
    pub seed: u64,
    /// Empty the cache directories before starting.
    pub fresh: bool,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        ReplayOptions {
            workers: 1,
            faults: Vec::new(),
            seed: 0,
            fresh: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplaySummary {
    pub requests: u64,
    pub pages: u64,
    pub hits: u64,
    pub misses_cached: u64,
    pub misses_bypassed: u64,
    pub fallbacks: u64,
    /// Page-level hit rate; absent for an empty trace.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hit_rate: Option<f64>,
    pub bytes_requested: u64,
    pub bytes_from_remote: u64,
    pub evictions: u64,
    pub mismatches: u64,
    pub failed_requests: u64,
    pub faults_injected: u64,
    pub faults_never_applied: u64,
    pub corrupt_injections: u64,
    /// Corrupt injections whose request logged a Corrupted error and was
    /// served by fallback.
    pub corrupt_detected: u64,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub summary: ReplaySummary,
    pub metrics: MetricsSnapshot,
    /// Page outcomes in trace order, one letter each (see `outcome_code`).
    pub sequence: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub problems: Vec<String>,
}

impl ReplayReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }

    /// Outcomes as parsed from `sequence`.
    pub fn outcomes(&self) -> Vec<CacheOutcome> {
        self.sequence
            .chars()
            .map(|c| match c {
                'H' => CacheOutcome::Hit,
                'M' => CacheOutcome::MissCached,
                'B' => CacheOutcome::MissBypassed,
                _ => CacheOutcome::Fallback,
            })
            .collect()
    }
}

const MAX_PROBLEMS: usize = 20;

struct Shared<'a> {
    entries: &'a [TraceEntry],
    cache: Cache,
    store: Arc<SyntheticStore>,
    clock: Arc<ManualClock>,
    faults: Arc<FaultInjector>,
    pending: Mutex<Vec<FaultSpec>>,
    next: AtomicUsize,
    results: Mutex<Vec<Option<Vec<CacheOutcome>>>>,
    tally: Mutex<Tally>,
    read_timeout_ms: u64,
}

#[derive(Default)]
struct Tally {
    mismatches: u64,
    failed: u64,
    injected: u64,
    corrupt_injections: u64,
    corrupt_detected: u64,
    problems: Vec<String>,
}

impl Tally {
    fn problem(&mut self, p: String) {
        if self.problems.len() < MAX_PROBLEMS {
            self.problems.push(p);
        }
    }
}

/// Replays `entries` against a cache built from `config`. A byte mismatch
/// never aborts the run; it is counted in the summary.
pub fn replay(entries: &[TraceEntry], config: &CacheConfig, options: &ReplayOptions) -> Result<ReplayReport, CacheError> {
    config.validate()?;
    if options.fresh {
        for i in 0..config.dirs.len() {
            let store = PageStore::new(
                config.layout_for(i),
                DirId(i as u16),
                StoreOptions::default(),
                Arc::new(FaultInjector::new()),
            );
            store.wipe()?;
        }
    }
    let store = Arc::new(SyntheticStore::for_trace(entries, options.seed));
    let clock = Arc::new(ManualClock::new(entries.first().map_or(0, |e| e.timestamp_ms)));
    let faults = Arc::new(FaultInjector::new());
    let env = CacheEnv {
        clock: clock.clone(),
        faults: Arc::clone(&faults),
    };
    let backing: Arc<dyn BackingStore> = store.clone();
    let cache = Cache::open_in(config.clone(), backing, env)?;
    let mut pending = options.faults.clone();
    pending.sort_by_key(|f| f.at_request_index);
    let shared = Shared {
        entries,
        cache,
        store,
        clock,
        faults,
        pending: Mutex::new(pending),
        next: AtomicUsize::new(0),
        results: Mutex::new(vec![None; entries.len()]),
        tally: Mutex::new(Tally::default()),
        read_timeout_ms: config.read_timeout_ms,
    };
    let workers = options.workers.max(1);
    if workers == 1 {
        shared.work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| shared.work());
            }
        });
    }

    let Shared {
        cache,
        store,
        pending,
        results,
        tally,
        ..
    } = shared;
    let tally = tally.into_inner();
    let outcomes: Vec<CacheOutcome> = results.into_inner().into_iter().flatten().flatten().collect();
    let metrics = cache.snapshot();
    let count = |o: CacheOutcome| outcomes.iter().filter(|&&x| x == o).count() as u64;
    let summary = ReplaySummary {
        requests: entries.len() as u64,
        pages: outcomes.len() as u64,
        hits: count(CacheOutcome::Hit),
        misses_cached: count(CacheOutcome::MissCached),
        misses_bypassed: count(CacheOutcome::MissBypassed),
        fallbacks: count(CacheOutcome::Fallback),
        hit_rate: (!outcomes.is_empty()).then(|| count(CacheOutcome::Hit) as f64 / outcomes.len() as f64),
        bytes_requested: entries.iter().map(|e| e.length).sum(),
        bytes_from_remote: store.bytes_read(),
        evictions: metrics.derived.evictions,
        mismatches: tally.mismatches,
        failed_requests: tally.failed,
        faults_injected: tally.injected,
        faults_never_applied: pending.into_inner().len() as u64,
        corrupt_injections: tally.corrupt_injections,
        corrupt_detected: tally.corrupt_detected,
        workers,
    };
    Ok(ReplayReport {
        summary,
        metrics,
        sequence: outcomes.iter().map(|&o| outcome_code(o)).collect(),
        problems: tally.problems,
    })
}

impl Shared<'_> {
    fn work(&self) {
        loop {
            let i = self.next.fetch_add(1, Ordering::SeqCst);
            let Some(e) = self.entries.get(i) else {
                return;
            };
            self.clock.advance_to(e.timestamp_ms);
            let corrupted = self.apply_faults(i, e);
            let before = corrupted.then(|| self.cache.snapshot().errors(ErrorClass::Corrupted));
            let ctx = ReadContext {
                scope: e.scope.clone(),
                run_id: e.run().map(str::to_string),
            };
            let res = self.cache.read_with(&e.file_id, e.offset, e.length, &ctx);
            let mut tally = self.tally.lock();
            match res {
                Ok(r) => {
                    let version = self.store.version(&e.file_id).unwrap_or_default();
                    if r.data != self.store.content(&e.file_id, &version, e.offset, e.length) {
                        tally.mismatches += 1;
                        tally.problem(format!("request {i}: byte mismatch reading {}", e));
                    }
                    if let Some(before) = before {
                        let after = self.cache.snapshot().errors(ErrorClass::Corrupted);
                        if after > before && r.pages.contains(&CacheOutcome::Fallback) {
                            tally.corrupt_detected += 1;
                        } else {
                            tally.problem(format!("request {i}: injected corruption went unnoticed"));
                        }
                    }
                    self.results.lock()[i] = Some(r.pages);
                }
                Err(err) => {
                    tally.failed += 1;
                    tally.problem(format!("request {i}: {err}"));
                }
            }
        }
    }

    /// Applies every due fault that can be applied now. Returns whether a
    /// page of this request was corrupted.
    fn apply_faults(&self, i: usize, e: &TraceEntry) -> bool {
        let mut pending = self.pending.lock();
        if pending.first().is_none_or(|f| f.at_request_index > i) {
            return false;
        }
        let p = self.cache.page_size();
        let version = self.store.version(&e.file_id).unwrap_or_default();
        let file_id = FileId::derive(&e.file_id, &version);
        let cached: Vec<PageId> = (e.offset / p..=(e.offset + e.length - 1) / p)
            .map(|idx| PageId::new(file_id.clone(), idx))
            .filter(|pg| self.cache.contains(pg))
            .collect();
        let mut corrupted = false;
        let mut used_pages: Vec<PageId> = Vec::new();
        let mut tally = self.tally.lock();
        pending.retain(|f| {
            if f.at_request_index > i {
                return true;
            }
            match f.kind {
                FaultKind::Enospc => {
                    let dir = f.target.as_deref().and_then(|t| t.parse::<u16>().ok()).map(DirId);
                    self.faults.disk_full_after(dir, 0, f.number().unwrap_or(1) as u32);
                    tally.injected += 1;
                    false
                }
                FaultKind::Hang | FaultKind::Corrupt => {
                    if f.target.as_ref().is_some_and(|t| *t != e.file_id) {
                        return true;
                    }
                    let Some(page) = cached.iter().find(|pg| !used_pages.contains(pg)).cloned() else {
                        return true;
                    };
                    let applied = if f.kind == FaultKind::Hang {
                        let ms = f.number().unwrap_or(2 * self.read_timeout_ms);
                        self.faults.hang_reads(Some(page.clone()), 1, Duration::from_millis(ms));
                        true
                    } else {
                        match self.corrupt(&page, f.corrupt_mode().unwrap_or(CorruptMode::Flip)) {
                            Ok(()) => {
                                corrupted = true;
                                tally.corrupt_injections += 1;
                                true
                            }
                            Err(err) => {
                                tally.problem(format!("request {i}: could not corrupt {page}: {err}"));
                                false
                            }
                        }
                    };
                    if applied {
                        tally.injected += 1;
                        used_pages.push(page);
                        false
                    } else {
                        true
                    }
                }
            }
        });
        corrupted
    }

    fn corrupt(&self, page: &PageId, mode: CorruptMode) -> std::io::Result<()> {
        let meta = self
            .cache
            .page_meta(page)
            .ok_or_else(|| std::io::Error::other("page no longer cached"))?;
        let path = self.cache.store(meta.dir).path_for(page);
        match mode {
            CorruptMode::Flip => {
                let mut bytes = fs::read(&path)?;
                let at = (page.page_index as usize * 31 + 7) % bytes.len();
                bytes[at] ^= 0x5a;
                fs::write(&path, bytes)
            }
            CorruptMode::Truncate => {
                let f = fs::OpenOptions::new().write(true).open(&path)?;
                f.set_len(meta.length / 2)
            }
        }
    }
}
