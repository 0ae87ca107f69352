//! Cache admission: a static allow-list of tables with per-table partition
//! caps, and a per-minute bucketed access-frequency test.

use std::collections::{HashMap, HashSet, VecDeque};
use std::hash::Hash;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::metadata_index::MetadataIndex;
use crate::scope::Scope;

const MINUTE_MS: u64 = 60_000;

#[derive(Debug, thiserror::Error)]
pub enum AdmissionError {
    #[error("invalid admission rules: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("table {database}.{table} listed more than once")]
    DuplicateTable { database: String, table: String },
    #[error("maxCachedPartitions for {database}.{table} must be positive")]
    ZeroPartitionCap { database: String, table: String },
    #[error("reading rule file: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableRule {
    pub name: String,
    #[serde(
        rename = "maxCachedPartitions",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub max_cached_partitions: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatabaseRule {
    pub name: String,
    pub tables: Vec<TableRule>,
}

/// Allow-list of `(database, table)` pairs. Anything not listed is rejected.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmissionRuleSet {
    pub databases: Vec<DatabaseRule>,
}

impl AdmissionRuleSet {
    pub fn from_json(text: &str) -> Result<Self, AdmissionError> {
        let rules: AdmissionRuleSet = serde_json::from_str(text)?;
        rules.validate()?;
        Ok(rules)
    }

    pub fn from_file(path: &Path) -> Result<Self, AdmissionError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn from_databases(databases: Vec<DatabaseRule>) -> Result<Self, AdmissionError> {
        let rules = AdmissionRuleSet { databases };
        rules.validate()?;
        Ok(rules)
    }

    pub fn validate(&self) -> Result<(), AdmissionError> {
        let mut seen = HashSet::new();
        for db in &self.databases {
            for t in &db.tables {
                if !seen.insert((db.name.as_str(), t.name.as_str())) {
                    return Err(AdmissionError::DuplicateTable {
                        database: db.name.clone(),
                        table: t.name.clone(),
                    });
                }
                if t.max_cached_partitions == Some(0) {
                    return Err(AdmissionError::ZeroPartitionCap {
                        database: db.name.clone(),
                        table: t.name.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn table(&self, database: &str, table: &str) -> Option<&TableRule> {
        self.databases
            .iter()
            .filter(|d| d.name == database)
            .flat_map(|d| d.tables.iter())
            .find(|t| t.name == table)
    }
}

/// What the static filter needs to know about current cache contents.
pub trait PartitionCensus {
    /// Number of distinct partitions of `database.table` with cached pages.
    fn cached_partitions(&self, database: &str, table: &str) -> usize;
    fn is_cached(&self, scope: &Scope) -> bool;
}

impl PartitionCensus for MetadataIndex {
    fn cached_partitions(&self, database: &str, table: &str) -> usize {
        Scope::table(database, table)
            .map(|t| self.child_scopes(&t).len())
            .unwrap_or(0)
    }

    fn is_cached(&self, scope: &Scope) -> bool {
        self.has_scope(scope)
    }
}

/// Static allow-list decision for data in `scope`.
///
/// A partition of a capped table is admitted while fewer than the cap are
/// cached, or if it is already one of the cached ones. Scopes above table
/// level never match a rule.
pub fn admit_static(rules: &AdmissionRuleSet, scope: &Scope, census: &dyn PartitionCensus) -> bool {
    let (Some(db), Some(table)) = (scope.schema_name(), scope.table_name()) else {
        return false;
    };
    let Some(rule) = rules.table(db, table) else {
        return false;
    };
    match (rule.max_cached_partitions, scope.partition_name()) {
        (None, _) | (_, None) => true,
        (Some(cap), Some(_)) => {
            census.is_cached(scope) || census.cached_partitions(db, table) < cap as usize
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateLimitConfig {
    pub window_minutes: u32,
    pub threshold: u32,
}

impl Default for RateLimitConfig {
    fn default() -> Self {
        RateLimitConfig {
            window_minutes: 10,
            threshold: 15,
        }
    }
}

#[derive(Debug)]
struct Bucket<K> {
    minute: u64,
    counts: HashMap<K, u32>,
}

/// "Accessed more than X times in the last Y minutes", with one count map
/// per wall-clock minute.
///
/// A bucket for minute `m` is live at time `now` iff
/// `m > minute(now) - window_minutes`; older buckets are dropped on the next
/// `record_access`.
#[derive(Debug)]
pub struct BucketTimeRateLimit<K = String> {
    window_minutes: u64,
    threshold: u32,
    buckets: VecDeque<Bucket<K>>,
}

impl<K: Eq + Hash + Clone> BucketTimeRateLimit<K> {
    pub fn new(config: RateLimitConfig) -> Self {
        assert!(
            config.window_minutes > 0,
            "window must be at least one minute"
        );
        assert!(config.threshold > 0, "threshold must be positive");
        BucketTimeRateLimit {
            window_minutes: u64::from(config.window_minutes),
            threshold: config.threshold,
            buckets: VecDeque::new(),
        }
    }

    pub fn window_minutes(&self) -> u64 {
        self.window_minutes
    }

    pub fn threshold(&self) -> u32 {
        self.threshold
    }

    fn oldest_live_minute(&self, now_ms: u64) -> u64 {
        (now_ms / MINUTE_MS + 1).saturating_sub(self.window_minutes)
    }

    pub fn record_access(&mut self, block: &K, now_ms: u64) {
        let minute = now_ms / MINUTE_MS;
        // Clock going backwards lands in the newest bucket.
        let minute = self.buckets.back().map_or(minute, |b| b.minute.max(minute));
        self.discard_expired(minute * MINUTE_MS);
        match self.buckets.back_mut() {
            Some(b) if b.minute == minute => {
                *b.counts.entry(block.clone()).or_default() += 1;
            }
            _ => {
                let mut counts = HashMap::new();
                counts.insert(block.clone(), 1);
                self.buckets.push_back(Bucket { minute, counts });
            }
        }
    }

    fn discard_expired(&mut self, now_ms: u64) {
        let oldest = self.oldest_live_minute(now_ms);
        while self.buckets.front().is_some_and(|b| b.minute < oldest) {
            self.buckets.pop_front();
        }
    }

    /// Accesses to `block` in the live window at `now_ms`.
    pub fn total(&self, block: &K, now_ms: u64) -> u64 {
        let oldest = self.oldest_live_minute(now_ms);
        let newest = now_ms / MINUTE_MS;
        self.buckets
            .iter()
            .filter(|b| b.minute >= oldest && b.minute <= newest)
            .filter_map(|b| b.counts.get(block))
            .map(|&c| u64::from(c))
            .sum()
    }

    /// Strictly more than `threshold` accesses in the window. Read-only.
    pub fn should_admit(&self, block: &K, now_ms: u64) -> bool {
        self.total(block, now_ms) > u64::from(self.threshold)
    }

    pub fn live_buckets(&self) -> usize {
        self.buckets.len()
    }

    pub fn bucket_count(&self, block: &K, minute: u64) -> u32 {
        self.buckets
            .iter()
            .find(|b| b.minute == minute)
            .and_then(|b| b.counts.get(block).copied())
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metadata_index::PageMetadata;
    use crate::page_store::{DirId, FileId, PageId};
    use proptest::prelude::*;

    const RULES: &str = r#"{
        "databases": [
            {
                "name": "database_foo",
                "tables": [
                    { "name": "table_bar", "maxCachedPartitions": 100 },
                    { "name": "table_baz" }
                ]
            }
        ]
    }"#;

    struct Census(usize, bool);

    impl PartitionCensus for Census {
        fn cached_partitions(&self, _: &str, _: &str) -> usize {
            self.0
        }
        fn is_cached(&self, _: &Scope) -> bool {
            self.1
        }
    }

    fn part(p: &str) -> Scope {
        Scope::partition("database_foo", "table_bar", p).unwrap()
    }

    #[test]
    fn parses_rule_file() {
        let rules = AdmissionRuleSet::from_json(RULES).unwrap();
        assert_eq!(
            rules
                .table("database_foo", "table_bar")
                .unwrap()
                .max_cached_partitions,
            Some(100)
        );
        assert!(rules
            .table("database_foo", "table_baz")
            .unwrap()
            .max_cached_partitions
            .is_none());
    }

    #[test]
    fn unknown_key_is_named_in_error() {
        let bad =
            r#"{"databases": [{"name": "d", "tables": [{"name": "t", "maxCachedPartition": 3}]}]}"#;
        let err = AdmissionRuleSet::from_json(bad).unwrap_err().to_string();
        assert!(err.contains("maxCachedPartition"), "{err}");
        let bad = r#"{"databases": [], "extra": 1}"#;
        assert!(AdmissionRuleSet::from_json(bad)
            .unwrap_err()
            .to_string()
            .contains("extra"));
    }

    #[test]
    fn duplicate_table_rejected() {
        let dup = r#"{"databases": [{"name": "d", "tables": [{"name": "t"}, {"name": "t"}]}]}"#;
        assert!(matches!(
            AdmissionRuleSet::from_json(dup),
            Err(AdmissionError::DuplicateTable { .. })
        ));
    }

    #[test]
    fn partition_cap_of_one_hundred() {
        let rules = AdmissionRuleSet::from_json(RULES).unwrap();
        assert!(admit_static(&rules, &part("new"), &Census(99, false)));
        assert!(!admit_static(&rules, &part("new"), &Census(100, false)));
        assert!(admit_static(&rules, &part("old"), &Census(100, true)));
    }

    #[test]
    fn unlisted_tables_and_shallow_scopes_rejected() {
        let rules = AdmissionRuleSet::from_json(RULES).unwrap();
        let other = Scope::partition("database_foo", "nope", "p").unwrap();
        assert!(!admit_static(&rules, &other, &Census(0, false)));
        assert!(!admit_static(
            &rules,
            &Scope::schema("database_foo").unwrap(),
            &Census(0, false)
        ));
        assert!(admit_static(
            &rules,
            &Scope::partition("database_foo", "table_baz", "p").unwrap(),
            &Census(10_000, false)
        ));
    }

    #[test]
    fn census_from_index_tracks_live_partitions() {
        let mut idx = MetadataIndex::new();
        let add = |idx: &mut MetadataIndex, p: &str| {
            let id = PageId::new(FileId::derive(p, "1"), 0);
            idx.add(PageMetadata::new(id.clone(), 1, part(p), DirId(0), 0))
                .unwrap();
            id
        };
        let a = add(&mut idx, "a");
        add(&mut idx, "b");
        assert_eq!(idx.cached_partitions("database_foo", "table_bar"), 2);
        assert!(idx.is_cached(&part("a")));
        idx.remove(&a);
        assert_eq!(idx.cached_partitions("database_foo", "table_bar"), 1);
        assert!(!idx.is_cached(&part("a")));
    }

    fn limiter(window: u32, threshold: u32) -> BucketTimeRateLimit<&'static str> {
        BucketTimeRateLimit::new(RateLimitConfig {
            window_minutes: window,
            threshold,
        })
    }

    #[test]
    fn counts_within_one_minute() {
        let mut rl = limiter(10, 15);
        for s in [0, 10_000, 59_999] {
            rl.record_access(&"b", s);
        }
        assert_eq!(rl.bucket_count(&"b", 0), 3);
        assert_eq!(rl.live_buckets(), 1);
        rl.record_access(&"b", 60_000);
        assert_eq!(rl.live_buckets(), 2);
    }

    #[test]
    fn window_expiry_drops_oldest_bucket() {
        let y = 10;
        let mut rl = limiter(y, 15);
        let m = 5 * MINUTE_MS;
        rl.record_access(&"b", m);
        rl.record_access(&"b", m + u64::from(y) * MINUTE_MS);
        assert_eq!(rl.total(&"b", m + u64::from(y) * MINUTE_MS), 1);
        assert_eq!(rl.live_buckets(), 1);
    }

    #[test]
    fn threshold_is_strict() {
        let mut rl = limiter(10, 15);
        for i in 0..15 {
            rl.record_access(&"b", i * 1000);
        }
        assert!(!rl.should_admit(&"b", 15_000));
        rl.record_access(&"b", 16_000);
        assert!(rl.should_admit(&"b", 16_000));
        assert!(!rl.should_admit(&"unknown", 16_000));
    }

    #[test]
    fn expired_accesses_stop_counting() {
        // 16 accesses, 2 of which fall in a bucket that has just left the window.
        let mut rl = limiter(2, 15);
        rl.record_access(&"b", 0);
        rl.record_access(&"b", 1_000);
        for i in 0..14 {
            rl.record_access(&"b", MINUTE_MS + i * 100);
        }
        assert!(rl.should_admit(&"b", MINUTE_MS + 59_000));
        assert_eq!(rl.total(&"b", MINUTE_MS + 59_000), 16);
        assert_eq!(rl.total(&"b", 2 * MINUTE_MS), 14);
        assert!(!rl.should_admit(&"b", 2 * MINUTE_MS));
    }

    proptest! {
        /// One more access can only raise a block's total, so it never turns
        /// an admit into a reject.
        #[test]
        fn extra_access_never_revokes_admission(
            gaps in proptest::collection::vec(0u64..40_000, 1..80),
            extra_at in 0usize..80,
            window in 1u32..5,
            threshold in 1u32..8,
        ) {
            let mut times = Vec::new();
            let mut t = 0;
            for g in gaps {
                t += g;
                times.push(t);
            }
            let extra_at = extra_at.min(times.len() - 1);
            let mut base = limiter(window, threshold);
            let mut more = limiter(window, threshold);
            for (i, &t) in times.iter().enumerate() {
                base.record_access(&"b", t);
                more.record_access(&"b", t);
                if i == extra_at {
                    more.record_access(&"b", t);
                }
                prop_assert!(more.total(&"b", t) >= base.total(&"b", t));
                prop_assert!(!base.should_admit(&"b", t) || more.should_admit(&"b", t));
            }
        }

        /// Memory stays bounded by the window, however long the stream runs.
        #[test]
        fn live_buckets_never_exceed_window(
            steps in proptest::collection::vec((0u64..90_000, 0u8..20), 1..300),
            window in 1u32..6,
        ) {
            let keys = ["k0", "k1", "k2", "k3", "k4", "k5", "k6", "k7", "k8", "k9",
                "k10", "k11", "k12", "k13", "k14", "k15", "k16", "k17", "k18", "k19"];
            let mut rl = limiter(window, 3);
            let mut t = 0;
            for (gap, k) in steps {
                t += gap;
                rl.record_access(&keys[k as usize], t);
                prop_assert!(rl.live_buckets() <= window as usize);
            }
        }
    }
}
