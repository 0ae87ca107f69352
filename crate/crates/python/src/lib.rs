//! Python bindings. The cache is always backed by the synthetic remote store,
//! which makes it useful for experiments and tests rather than production
//! reads; the ring, limiter and trace tools are the real thing.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;
use std::time::Duration;

use edgecache::admission::{admit_static, AdmissionRuleSet, BucketTimeRateLimit, PartitionCensus, RateLimitConfig};
use edgecache::affinity::{self, Choice, WorkerLoad};
use edgecache::cache_manager::{CacheConfig, CacheOutcome, DirConfig, ReadContext};
use edgecache::eviction::PolicyKind;
use edgecache::scope::Scope;
use edgecache::trace::{self, FaultSpec, ReplayOptions, SyntheticStore, TraceEntry, ZipfWorkloadSpec};
use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_scope(s: Option<&str>) -> PyResult<Scope> {
    match s {
        None | Some("") => Ok(Scope::global()),
        Some(s) => s.parse().map_err(value_err),
    }
}

fn outcome_name(o: CacheOutcome) -> &'static str {
    match o {
        CacheOutcome::Hit => "HIT",
        CacheOutcome::MissCached => "MISS_CACHED",
        CacheOutcome::MissBypassed => "MISS_BYPASSED",
        CacheOutcome::Fallback => "FALLBACK",
    }
}

fn parse_trace(text: &str) -> PyResult<Vec<TraceEntry>> {
    trace::read_trace(text.as_bytes()).map_err(value_err)
}

/// A page cache over synthetic remote files registered with `add_file`.
#[pyclass(module = "edgecache")]
struct Cache {
    inner: edgecache::cache_manager::Cache,
    store: Arc<SyntheticStore>,
}

#[pymethods]
impl Cache {
    /// Either `config_json` (a full configuration document) or `dirs`, a
    /// list of `(path, capacity_bytes)`.
    #[new]
    #[pyo3(signature = (dirs=None, page_size=1 << 20, policy="lru", seed=0, config_json=None))]
    fn new(
        dirs: Option<Vec<(String, u64)>>,
        page_size: u64,
        policy: &str,
        seed: u64,
        config_json: Option<&str>,
    ) -> PyResult<Self> {
        let cfg = match (config_json, dirs) {
            (Some(text), None) => CacheConfig::from_json(text).map_err(value_err)?,
            (None, Some(dirs)) if !dirs.is_empty() => {
                let mut cfg = CacheConfig::single_dir(&dirs[0].0, dirs[0].1);
                cfg.dirs = dirs
                    .into_iter()
                    .map(|(path, capacity_bytes)| DirConfig {
                        path: path.into(),
                        capacity_bytes,
                    })
                    .collect();
                cfg.page_size_bytes = page_size;
                cfg.eviction_policy = match policy.to_ascii_lowercase().as_str() {
                    "lru" => PolicyKind::Lru,
                    "fifo" => PolicyKind::Fifo,
                    "random" => PolicyKind::Random,
                    other => return Err(value_err(format!("unknown policy {other:?}"))),
                };
                cfg.eviction_seed = seed;
                cfg.validate().map_err(value_err)?;
                cfg
            }
            _ => return Err(value_err("pass exactly one of dirs and config_json")),
        };
        let store = Arc::new(SyntheticStore::new(seed));
        let inner = edgecache::cache_manager::Cache::open(cfg, store.clone()).map_err(value_err)?;
        Ok(Cache { inner, store })
    }

    fn add_file(&self, path: &str, size: u64) {
        self.store.add_file(path, size);
    }

    /// Moves the remote file to a new version and returns it.
    fn bump_version(&self, path: &str) -> PyResult<String> {
        self.store
            .bump_version(path)
            .ok_or_else(|| PyKeyError::new_err(path.to_string()))
    }

    /// Returns `(data, outcome)`.
    #[pyo3(signature = (path, offset, length, scope=None))]
    fn read<'py>(
        &self,
        py: Python<'py>,
        path: &str,
        offset: u64,
        length: u64,
        scope: Option<&str>,
    ) -> PyResult<(Bound<'py, PyBytes>, &'static str)> {
        let ctx = ReadContext::scoped(parse_scope(scope)?);
        let r = py
            .detach(|| self.inner.read_with(path, offset, length, &ctx))
            .map_err(value_err)?;
        Ok((PyBytes::new(py, &r.data), outcome_name(r.outcome)))
    }

    /// What the remote holds at the current version, bypassing the cache.
    fn expected<'py>(&self, py: Python<'py>, path: &str, offset: u64, length: u64) -> PyResult<Bound<'py, PyBytes>> {
        let v = self
            .store
            .version(path)
            .ok_or_else(|| PyKeyError::new_err(path.to_string()))?;
        Ok(PyBytes::new(py, &self.store.content(path, &v, offset, length)))
    }

    /// Drops every cached page of `path` older than its current version.
    fn invalidate(&self, path: &str) -> PyResult<usize> {
        let v = self
            .store
            .version(path)
            .ok_or_else(|| PyKeyError::new_err(path.to_string()))?;
        Ok(self.inner.invalidate_file(path, &v))
    }

    fn page_count(&self) -> usize {
        self.inner.page_count()
    }

    #[pyo3(signature = (scope=None))]
    fn usage(&self, scope: Option<&str>) -> PyResult<u64> {
        Ok(self.inner.usage(&parse_scope(scope)?))
    }

    fn metrics_json(&self) -> String {
        self.inner.snapshot().to_json()
    }
}

#[pyclass(module = "edgecache")]
struct HashRing {
    inner: affinity::HashRing,
}

#[pymethods]
impl HashRing {
    #[new]
    #[pyo3(signature = (nodes=Vec::new(), virtual_points=100, grace_ms=600_000))]
    fn new(nodes: Vec<String>, virtual_points: u32, grace_ms: u64) -> PyResult<Self> {
        if virtual_points == 0 {
            return Err(value_err("virtual_points must be positive"));
        }
        let mut inner = affinity::HashRing::new(virtual_points, Duration::from_millis(grace_ms));
        for n in nodes {
            inner.add_node(n).map_err(value_err)?;
        }
        Ok(HashRing { inner })
    }

    fn add_node(&mut self, node: String) -> PyResult<()> {
        self.inner.add_node(node).map_err(value_err)
    }

    fn remove_node(&mut self, node: &str) -> PyResult<()> {
        self.inner.remove_node(node).map_err(value_err)
    }

    fn node_leave(&mut self, node: &str, now_ms: u64) -> PyResult<()> {
        self.inner.node_leave(node, now_ms).map_err(value_err)
    }

    fn node_return(&mut self, node: &str, now_ms: u64) -> PyResult<()> {
        self.inner.node_return(node, now_ms).map_err(value_err)
    }

    /// Nodes whose grace ran out and were dropped from the ring.
    fn expire_grace(&mut self, now_ms: u64) -> Vec<String> {
        self.inner.expire_grace(now_ms)
    }

    fn nodes(&self) -> Vec<String> {
        self.inner.nodes().cloned().collect()
    }

    #[pyo3(signature = (file_id, replicas=2))]
    fn preferred_nodes(&self, file_id: &str, replicas: usize) -> PyResult<Vec<String>> {
        self.inner.preferred_nodes(file_id, replicas).map_err(value_err)
    }

    fn primary(&self, file_id: &str) -> PyResult<String> {
        self.inner.primary(file_id).map_err(value_err)
    }

    /// `loads` maps node → `(assigned, pending, max_splits, max_pending)`;
    /// nodes left out are idle with no limits. Returns
    /// `(node, choice, cache_enabled)`.
    #[pyo3(signature = (file_id, loads=HashMap::new()))]
    fn assign_split(
        &self,
        file_id: &str,
        loads: HashMap<String, (u64, u64, u64, u64)>,
    ) -> PyResult<(String, &'static str, bool)> {
        let mut all: HashMap<String, WorkerLoad> = self
            .inner
            .nodes()
            .map(|n| (n.clone(), WorkerLoad::new(u64::MAX, u64::MAX)))
            .collect();
        for (n, (a, p, ms, mp)) in loads {
            let mut l = WorkerLoad::new(ms, mp);
            l.assigned_splits = a;
            l.pending_splits = p;
            all.insert(n, l);
        }
        let loads = all;
        let a = self.inner.assign_split(file_id, &loads).map_err(value_err)?;
        let choice = match a.choice {
            Choice::Primary => "primary",
            Choice::Secondary => "secondary",
            Choice::Fallback => "fallback",
        };
        Ok((a.node_id, choice, a.cache_enabled))
    }
}

#[pyclass(module = "edgecache")]
struct RateLimiter {
    inner: BucketTimeRateLimit<String>,
}

#[pymethods]
impl RateLimiter {
    #[new]
    fn new(window_minutes: u32, threshold: u32) -> PyResult<Self> {
        if window_minutes == 0 || threshold == 0 {
            return Err(value_err("window_minutes and threshold must be positive"));
        }
        Ok(RateLimiter {
            inner: BucketTimeRateLimit::new(RateLimitConfig {
                window_minutes,
                threshold,
            }),
        })
    }

    fn record_access(&mut self, key: String, now_ms: u64) {
        self.inner.record_access(&key, now_ms);
    }

    fn total(&self, key: String, now_ms: u64) -> u64 {
        self.inner.total(&key, now_ms)
    }

    fn should_admit(&self, key: String, now_ms: u64) -> bool {
        self.inner.should_admit(&key, now_ms)
    }
}

/// Census over an explicit list of cached partition scopes.
struct Listed(HashSet<Scope>);

impl PartitionCensus for Listed {
    fn cached_partitions(&self, database: &str, table: &str) -> usize {
        self.0
            .iter()
            .filter(|s| s.labels().len() == 3 && s.labels()[0] == database && s.labels()[1] == table)
            .count()
    }

    fn is_cached(&self, scope: &Scope) -> bool {
        self.0.contains(scope)
    }
}

#[pyclass(module = "edgecache")]
struct AdmissionRules {
    inner: AdmissionRuleSet,
}

#[pymethods]
impl AdmissionRules {
    #[new]
    fn new(rules_json: &str) -> PyResult<Self> {
        Ok(AdmissionRules {
            inner: AdmissionRuleSet::from_json(rules_json).map_err(value_err)?,
        })
    }

    /// Whether a page of `scope` may be cached, given the partitions that
    /// already have cached pages.
    #[pyo3(signature = (scope, cached=Vec::new()))]
    fn admits(&self, scope: &str, cached: Vec<String>) -> PyResult<bool> {
        let census = Listed(
            cached
                .iter()
                .map(|s| parse_scope(Some(s)))
                .collect::<PyResult<_>>()?,
        );
        Ok(admit_static(&self.inner, &parse_scope(Some(scope))?, &census))
    }
}

/// Trace text for a JSON workload spec.
#[pyfunction]
fn generate(spec_json: &str) -> PyResult<String> {
    let spec = ZipfWorkloadSpec::from_json(spec_json).map_err(value_err)?;
    let entries = trace::generate(&spec).map_err(value_err)?;
    let mut out = Vec::new();
    trace::write_trace(&mut out, &entries).map_err(value_err)?;
    String::from_utf8(out).map_err(value_err)
}

#[pyfunction]
fn characterize(trace_text: &str) -> PyResult<String> {
    let stats = trace::characterize(&parse_trace(trace_text)?);
    serde_json::to_string_pretty(&stats).map_err(value_err)
}

#[pyfunction]
fn simulate(trace_text: &str, config_json: &str) -> PyResult<(String, f64)> {
    let cfg = CacheConfig::from_json(config_json).map_err(value_err)?;
    let r = trace::simulate(&parse_trace(trace_text)?, &cfg).map_err(value_err)?;
    Ok((r.sequence_string(), r.hit_rate.unwrap_or(0.0)))
}

/// Replays into the directories of `config_json`, which are emptied first.
#[pyfunction]
#[pyo3(signature = (trace_text, config_json, faults_json=None, seed=0, workers=1))]
fn replay(
    py: Python<'_>,
    trace_text: &str,
    config_json: &str,
    faults_json: Option<&str>,
    seed: u64,
    workers: usize,
) -> PyResult<String> {
    let cfg = CacheConfig::from_json(config_json).map_err(value_err)?;
    let entries = parse_trace(trace_text)?;
    let faults = match faults_json {
        Some(f) => FaultSpec::list_from_json(f).map_err(value_err)?,
        None => Vec::new(),
    };
    let opts = ReplayOptions {
        workers: workers.max(1),
        faults,
        seed,
        fresh: true,
    };
    let report = py
        .detach(|| trace::replay(&entries, &cfg, &opts))
        .map_err(value_err)?;
    Ok(report.to_json())
}

#[pymodule]
#[pyo3(name = "edgecache")]
fn edgecache_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Cache>()?;
    m.add_class::<HashRing>()?;
    m.add_class::<RateLimiter>()?;
    m.add_class::<AdmissionRules>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(characterize, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    Ok(())
}
