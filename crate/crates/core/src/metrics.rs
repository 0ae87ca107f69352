//! Cache event counters with per-scope and per-run rollups.
//!
//! `record` takes a read lock and two relaxed atomic adds on the hot path.
//! Snapshots read each counter atomically but not all counters at one
//! instant; events in flight during a snapshot may show in one counter and
//! not yet in another.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::scope::{Scope, ScopeLevel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    Hit,
    MissCached,
    MissBypassed,
    Fallback,
    Evict,
    AdmitRejectStatic,
    AdmitRejectRate,
    Error,
}

impl EventKind {
    fn is_lookup(self) -> bool {
        matches!(
            self,
            EventKind::Hit | EventKind::MissCached | EventKind::MissBypassed | EventKind::Fallback
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Op {
    Get,
    Put,
    Delete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ErrorClass {
    Timeout,
    Corrupted,
    DiskFull,
    Io,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricEvent {
    pub kind: EventKind,
    pub op: Op,
    pub error_class: Option<ErrorClass>,
    pub scope: Scope,
    pub bytes: u64,
    pub run_id: Option<String>,
}

impl MetricEvent {
    pub fn new(kind: EventKind, op: Op, scope: Scope, bytes: u64) -> Self {
        MetricEvent {
            kind,
            op,
            error_class: None,
            scope,
            bytes,
            run_id: None,
        }
    }

    pub fn error(op: Op, class: ErrorClass, scope: Scope) -> Self {
        MetricEvent {
            kind: EventKind::Error,
            op,
            error_class: Some(class),
            scope,
            bytes: 0,
            run_id: None,
        }
    }

    pub fn with_run(mut self, run_id: Option<&str>) -> Self {
        self.run_id = run_id.map(str::to_string);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Key {
    kind: EventKind,
    op: Op,
    error_class: Option<ErrorClass>,
    scope: Scope,
    run_id: Option<String>,
}

#[derive(Debug, Default)]
struct Counter {
    count: AtomicU64,
    bytes: AtomicU64,
}

#[derive(Debug, Default)]
pub struct Metrics {
    counters: RwLock<HashMap<Key, Arc<Counter>>>,
}

/// Which dimensions to keep in a rollup. Dimensions not kept are summed over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GroupBy {
    /// Keep scope, truncated to this level.
    pub scope_level: Option<ScopeLevel>,
    pub run_id: bool,
    pub kind: bool,
    pub op: bool,
    pub error_class: bool,
}

impl GroupBy {
    pub fn all() -> Self {
        GroupBy {
            scope_level: Some(ScopeLevel::Partition),
            run_id: true,
            kind: true,
            op: true,
            error_class: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterRow {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<EventKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub op: Option<Op>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_class: Option<ErrorClass>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scope: Option<Scope>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    pub count: u64,
    pub bytes: u64,
    /// HIT / (HIT + MISS_CACHED + MISS_BYPASSED + FALLBACK) over the rows
    /// sharing this row's scope and run; absent when that denominator is 0.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hit_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Derived {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hit_rate_overall: Option<f64>,
    pub lookups: u64,
    pub hits: u64,
    pub misses_cached: u64,
    pub misses_bypassed: u64,
    pub fallbacks: u64,
    pub evictions: u64,
    pub admit_rejects: u64,
    pub errors: u64,
    pub bytes_served: u64,
    /// op → error class → count.
    pub error_breakdown: BTreeMap<Op, BTreeMap<ErrorClass, u64>>,
}

/// Serialized form: `{counters: [...], derived: {...}}`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub counters: Vec<CounterRow>,
    pub derived: Derived,
}

impl MetricsSnapshot {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("snapshot is always serializable")
    }

    pub fn count(&self, kind: EventKind) -> u64 {
        self.counters
            .iter()
            .filter(|r| r.kind == Some(kind))
            .map(|r| r.count)
            .sum()
    }

    pub fn errors(&self, class: ErrorClass) -> u64 {
        self.derived
            .error_breakdown
            .values()
            .filter_map(|m| m.get(&class))
            .sum()
    }
}

type GroupKey = (
    Option<EventKind>,
    Option<Op>,
    Option<ErrorClass>,
    Option<Scope>,
    Option<String>,
);

impl Metrics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, mut event: MetricEvent) {
        match (event.kind, event.error_class) {
            (EventKind::Error, None) => event.error_class = Some(ErrorClass::Io),
            (k, Some(_)) if k != EventKind::Error => event.error_class = None,
            _ => {}
        }
        let key = Key {
            kind: event.kind,
            op: event.op,
            error_class: event.error_class,
            scope: event.scope,
            run_id: event.run_id,
        };
        if let Some(c) = self.counters.read().get(&key) {
            c.count.fetch_add(1, Ordering::Relaxed);
            c.bytes.fetch_add(event.bytes, Ordering::Relaxed);
            return;
        }
        let c = Arc::clone(self.counters.write().entry(key).or_default());
        c.count.fetch_add(1, Ordering::Relaxed);
        c.bytes.fetch_add(event.bytes, Ordering::Relaxed);
    }

    fn raw(&self) -> Vec<(Key, u64, u64)> {
        self.counters
            .read()
            .iter()
            .map(|(k, c)| {
                (
                    k.clone(),
                    c.count.load(Ordering::Relaxed),
                    c.bytes.load(Ordering::Relaxed),
                )
            })
            .collect()
    }

    /// Full-resolution snapshot (every dimension kept).
    pub fn snapshot(&self) -> MetricsSnapshot {
        self.snapshot_by(GroupBy::all())
    }

    pub fn snapshot_by(&self, group_by: GroupBy) -> MetricsSnapshot {
        let raw = self.raw();
        let mut derived = Derived::default();
        let mut groups: BTreeMap<GroupKey, (u64, u64)> = BTreeMap::new();
        // (scope, run) → (hits, lookups)
        let mut rates: HashMap<(Option<Scope>, Option<String>), (u64, u64)> = HashMap::new();
        for (k, count, bytes) in raw {
            if count == 0 {
                continue;
            }
            match k.kind {
                EventKind::Hit => derived.hits += count,
                EventKind::MissCached => derived.misses_cached += count,
                EventKind::MissBypassed => derived.misses_bypassed += count,
                EventKind::Fallback => derived.fallbacks += count,
                EventKind::Evict => derived.evictions += count,
                EventKind::AdmitRejectStatic | EventKind::AdmitRejectRate => {
                    derived.admit_rejects += count
                }
                EventKind::Error => {
                    derived.errors += count;
                    *derived
                        .error_breakdown
                        .entry(k.op)
                        .or_default()
                        .entry(k.error_class.unwrap_or(ErrorClass::Io))
                        .or_default() += count;
                }
            }
            if k.kind.is_lookup() {
                derived.lookups += count;
                derived.bytes_served += bytes;
            }
            let scope = group_by.scope_level.map(|l| k.scope.truncate(l));
            let run = if group_by.run_id {
                k.run_id.clone()
            } else {
                None
            };
            let gk: GroupKey = (
                group_by.kind.then_some(k.kind),
                group_by.op.then_some(k.op),
                if group_by.error_class {
                    k.error_class
                } else {
                    None
                },
                scope.clone(),
                run.clone(),
            );
            let e = groups.entry(gk).or_default();
            e.0 += count;
            e.1 += bytes;
            if k.kind.is_lookup() {
                let r = rates.entry((scope, run)).or_default();
                r.1 += count;
                if k.kind == EventKind::Hit {
                    r.0 += count;
                }
            }
        }
        derived.hit_rate_overall = ratio(derived.hits, derived.lookups);
        let counters = groups
            .into_iter()
            .map(|((kind, op, error_class, scope, run_id), (count, bytes))| {
                let hit_rate = rates
                    .get(&(scope.clone(), run_id.clone()))
                    .and_then(|&(h, n)| ratio(h, n));
                CounterRow {
                    kind,
                    op,
                    error_class,
                    scope,
                    run_id,
                    count,
                    bytes,
                    hit_rate,
                }
            })
            .collect();
        MetricsSnapshot { counters, derived }
    }

    pub fn hit_rate(&self) -> Option<f64> {
        self.snapshot_by(GroupBy::default())
            .derived
            .hit_rate_overall
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sc(s: &str) -> Scope {
        s.parse().unwrap()
    }

    #[test]
    fn hit_rate_three_of_four() {
        let m = Metrics::new();
        for _ in 0..3 {
            m.record(MetricEvent::new(
                EventKind::Hit,
                Op::Get,
                Scope::global(),
                10,
            ));
        }
        m.record(MetricEvent::new(
            EventKind::MissCached,
            Op::Get,
            Scope::global(),
            10,
        ));
        assert_eq!(m.hit_rate(), Some(0.75));
    }

    #[test]
    fn error_breakdown_by_op_and_class() {
        let m = Metrics::new();
        m.record(MetricEvent::error(
            Op::Get,
            ErrorClass::Timeout,
            Scope::global(),
        ));
        let snap = m.snapshot();
        assert_eq!(
            snap.derived.error_breakdown[&Op::Get][&ErrorClass::Timeout],
            1
        );
        assert_eq!(snap.errors(ErrorClass::Timeout), 1);
        assert_eq!(snap.derived.hit_rate_overall, None);
    }

    #[test]
    fn empty_snapshot() {
        let snap = Metrics::new().snapshot();
        assert!(snap.counters.is_empty());
        assert_eq!(snap.derived.hit_rate_overall, None);
        let json: serde_json::Value = serde_json::from_str(&snap.to_json()).unwrap();
        assert!(json["counters"].as_array().unwrap().is_empty());
        assert!(json["derived"].get("hit_rate_overall").is_none());
    }

    #[test]
    fn table_grouping_sums_to_total() {
        let m = Metrics::new();
        m.record(MetricEvent::new(EventKind::Hit, Op::Get, sc("s.a.p1"), 1));
        m.record(MetricEvent::new(EventKind::Hit, Op::Get, sc("s.a.p2"), 1));
        m.record(MetricEvent::new(
            EventKind::MissCached,
            Op::Get,
            sc("s.b.p1"),
            1,
        ));
        let snap = m.snapshot_by(GroupBy {
            scope_level: Some(ScopeLevel::Table),
            ..Default::default()
        });
        assert_eq!(snap.counters.len(), 2);
        assert_eq!(snap.counters.iter().map(|r| r.count).sum::<u64>(), 3);
        let a = snap
            .counters
            .iter()
            .find(|r| r.scope == Some(sc("s.a")))
            .unwrap();
        assert_eq!(a.hit_rate, Some(1.0));
        let b = snap
            .counters
            .iter()
            .find(|r| r.scope == Some(sc("s.b")))
            .unwrap();
        assert_eq!(b.hit_rate, Some(0.0));
    }

    #[test]
    fn error_class_is_normalized() {
        let m = Metrics::new();
        let mut e = MetricEvent::new(EventKind::Hit, Op::Get, Scope::global(), 1);
        e.error_class = Some(ErrorClass::Io);
        m.record(e);
        let mut e = MetricEvent::new(EventKind::Error, Op::Put, Scope::global(), 0);
        e.error_class = None;
        m.record(e);
        let snap = m.snapshot();
        assert!(snap
            .counters
            .iter()
            .all(|r| (r.kind == Some(EventKind::Error)) == r.error_class.is_some()));
    }

    #[test]
    fn serialized_counters_have_documented_fields() {
        let m = Metrics::new();
        m.record(MetricEvent::new(EventKind::Evict, Op::Delete, sc("s.t"), 5).with_run(Some("q1")));
        let v: serde_json::Value = serde_json::from_str(&m.snapshot().to_json()).unwrap();
        let row = &v["counters"][0];
        assert_eq!(row["kind"], "EVICT");
        assert_eq!(row["op"], "DELETE");
        assert_eq!(row["scope"], "s.t");
        assert_eq!(row["run_id"], "q1");
        assert_eq!(row["count"], 1);
        assert_eq!(row["bytes"], 5);
        assert!(row.get("error_class").is_none());
    }

    const KINDS: [EventKind; 8] = [
        EventKind::Hit,
        EventKind::MissCached,
        EventKind::MissBypassed,
        EventKind::Fallback,
        EventKind::Evict,
        EventKind::AdmitRejectStatic,
        EventKind::AdmitRejectRate,
        EventKind::Error,
    ];

    #[test]
    fn fold_oracle_on_random_events() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let scopes = ["", "a", "a.t", "a.t.p", "b.u.q"];
        let runs = [None, Some("r1"), Some("r2")];
        let m = Metrics::new();
        let mut events = Vec::new();
        for _ in 0..100_000 {
            let kind = KINDS[rng.random_range(0..KINDS.len())];
            let ev = if kind == EventKind::Error {
                MetricEvent::error(
                    Op::Get,
                    [ErrorClass::Timeout, ErrorClass::Corrupted][rng.random_range(0..2)],
                    sc(scopes[rng.random_range(0..5)]),
                )
            } else {
                MetricEvent::new(
                    kind,
                    Op::Get,
                    sc(scopes[rng.random_range(0..5)]),
                    rng.random_range(0..100),
                )
            }
            .with_run(runs[rng.random_range(0..3)]);
            m.record(ev.clone());
            events.push(ev);
        }
        let by_run = m.snapshot_by(GroupBy {
            run_id: true,
            kind: true,
            ..Default::default()
        });
        for run in runs {
            for kind in KINDS {
                let expect = events
                    .iter()
                    .filter(|e| e.run_id.as_deref() == run && e.kind == kind)
                    .count() as u64;
                let got = by_run
                    .counters
                    .iter()
                    .find(|r| r.run_id.as_deref() == run && r.kind == Some(kind))
                    .map_or(0, |r| r.count);
                assert_eq!(got, expect);
            }
            let lookups: Vec<_> = events
                .iter()
                .filter(|e| e.run_id.as_deref() == run && e.kind.is_lookup())
                .collect();
            let hits = lookups.iter().filter(|e| e.kind == EventKind::Hit).count();
            let row = by_run
                .counters
                .iter()
                .find(|r| r.run_id.as_deref() == run)
                .unwrap();
            assert_eq!(row.hit_rate, Some(hits as f64 / lookups.len() as f64));
        }
        // Conservation across every grouping.
        let total: u64 = events.len() as u64;
        for g in [
            GroupBy::default(),
            GroupBy::all(),
            GroupBy {
                scope_level: Some(ScopeLevel::Schema),
                ..Default::default()
            },
            GroupBy {
                error_class: true,
                op: true,
                ..Default::default()
            },
        ] {
            assert_eq!(
                m.snapshot_by(g)
                    .counters
                    .iter()
                    .map(|r| r.count)
                    .sum::<u64>(),
                total
            );
        }
    }

    #[test]
    fn counters_are_monotonic_across_snapshots() {
        let m = Metrics::new();
        let mut prev = 0;
        for i in 0..50 {
            m.record(MetricEvent::new(
                EventKind::Hit,
                Op::Get,
                Scope::global(),
                i,
            ));
            let c = m.snapshot().count(EventKind::Hit);
            assert!(c >= prev);
            prev = c;
        }
    }
}
