//! Disk-free simulation of a trace through the cache's decision logic.

use serde::Serialize;

use super::synthetic::{file_sizes, INITIAL_VERSION};
use super::TraceEntry;
use crate::cache_manager::{CacheConfig, CacheCore, CacheOutcome, ConfigError, Decision, PageAccess};
use crate::eviction::PolicyKind;
use crate::page_store::{FileId, PageId};

/// One letter per page outcome: H, M (miss, cached), B (bypassed), F.
pub fn outcome_code(o: CacheOutcome) -> char {
    match o {
        CacheOutcome::Hit => 'H',
        CacheOutcome::MissCached => 'M',
        CacheOutcome::MissBypassed => 'B',
        CacheOutcome::Fallback => 'F',
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub requests: u64,
    pub pages: u64,
    pub hits: u64,
    pub misses_cached: u64,
    pub misses_bypassed: u64,
    pub evictions: u64,
    /// Page-level hit rate; `None` for an empty trace.
    pub hit_rate: Option<f64>,
    #[serde(skip)]
    pub sequence: Vec<CacheOutcome>,
}

impl SimReport {
    pub fn sequence_string(&self) -> String {
        self.sequence.iter().map(|&o| outcome_code(o)).collect()
    }
}

/// Runs `entries` through the admission, quota, placement and eviction
/// logic `config` describes, without touching disk. Files are sized by
/// [`file_sizes`], as in replay.
pub fn simulate(entries: &[TraceEntry], config: &CacheConfig) -> Result<SimReport, ConfigError> {
    let mut core = CacheCore::new(config)?;
    let sizes = file_sizes(entries);
    let p = config.page_size_bytes;
    let mut report = SimReport {
        requests: entries.len() as u64,
        pages: 0,
        hits: 0,
        misses_cached: 0,
        misses_bypassed: 0,
        evictions: 0,
        hit_rate: None,
        sequence: Vec::new(),
    };
    for e in entries {
        let size = sizes[&e.file_id];
        let file_id = FileId::derive(&e.file_id, INITIAL_VERSION);
        report.evictions += core.observe_version(&e.file_id, &file_id).len() as u64;
        for idx in e.offset / p..=(e.offset + e.length - 1) / p {
            let page = PageId::new(file_id.clone(), idx);
            let access = core.access(
                &PageAccess {
                    path: &e.file_id,
                    page: &page,
                    length: p.min(size - idx * p),
                    scope: &e.scope,
                },
                e.timestamp_ms,
            );
            report.evictions += access.victims.len() as u64;
            let outcome = match access.decision {
                Decision::Hit { .. } | Decision::Wait(_) => CacheOutcome::Hit,
                Decision::Fetch { .. } => {
                    core.commit(&page, None);
                    CacheOutcome::MissCached
                }
                Decision::Bypass(_) => CacheOutcome::MissBypassed,
            };
            match outcome {
                CacheOutcome::Hit => report.hits += 1,
                CacheOutcome::MissCached => report.misses_cached += 1,
                _ => report.misses_bypassed += 1,
            }
            report.sequence.push(outcome);
        }
    }
    report.pages = report.sequence.len() as u64;
    report.hit_rate = (report.pages > 0).then(|| report.hits as f64 / report.pages as f64);
    Ok(report)
}

/// Single-directory simulation with the given policy and capacity.
pub fn simulate_with(
    entries: &[TraceEntry],
    policy: PolicyKind,
    capacity_bytes: u64,
    page_size: u64,
) -> Result<SimReport, ConfigError> {
    let mut cfg = CacheConfig::single_dir("/dev/null", capacity_bytes);
    cfg.page_size_bytes = page_size;
    cfg.eviction_policy = policy;
    simulate(entries, &cfg)
}
