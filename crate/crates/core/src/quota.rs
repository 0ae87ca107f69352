//! Hierarchical capacity rules over scopes.
//!
//! Child capacities may add up to more than their parent's: each rule binds on
//! its own. A write is checked bottom-up along its scope path, and every level
//! that would overflow yields an eviction demand. Partition demands evict
//! inside the partition in policy order; demands at table level or above pick
//! victims uniformly at random over all pages below that scope, so a
//! space-hungry child gives back proportionally more.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eviction::Evictor;
use crate::metadata_index::MetadataIndex;
use crate::page_store::PageId;
use crate::scope::{Scope, ScopeLevel};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuotaRule {
    pub scope: Scope,
    #[serde(rename = "capacity_bytes")]
    pub capacity: u64,
}

impl QuotaRule {
    pub fn new(scope: Scope, capacity: u64) -> Self {
        QuotaRule { scope, capacity }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DemandMode {
    /// Evict inside the scope in eviction-policy order.
    WithinScope,
    /// Evict uniformly at random over every page below the scope.
    RandomAcrossChildren,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionDemand {
    pub scope: Scope,
    pub bytes: u64,
    pub mode: DemandMode,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Fits,
    /// Demands ordered most specific first.
    Evict(Vec<EvictionDemand>),
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum QuotaError {
    #[error("more than one quota rule for scope `{0}`")]
    DuplicateRule(Scope),
    #[error("quota for scope `{0}` must be positive")]
    ZeroCapacity(Scope),
    #[error("{incoming} bytes can never fit in scope `{scope}` (capacity {capacity})")]
    ImpossibleFit {
        scope: Scope,
        capacity: u64,
        incoming: u64,
    },
}

#[derive(Debug)]
pub struct QuotaManager {
    rules: HashMap<Scope, u64>,
    rng: ChaCha8Rng,
}

impl QuotaManager {
    pub fn new(rules: impl IntoIterator<Item = QuotaRule>, seed: u64) -> Result<Self, QuotaError> {
        let mut map = HashMap::new();
        for r in rules {
            if r.capacity == 0 {
                return Err(QuotaError::ZeroCapacity(r.scope));
            }
            if map.insert(r.scope.clone(), r.capacity).is_some() {
                return Err(QuotaError::DuplicateRule(r.scope));
            }
        }
        Ok(QuotaManager {
            rules: map,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn unlimited() -> Self {
        QuotaManager {
            rules: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn capacity(&self, scope: &Scope) -> Option<u64> {
        self.rules.get(scope).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Walks from `scope` up to global and reports every ruled level that
    /// `incoming` more bytes would overflow. Scopes without a rule pass through.
    pub fn check(
        &self,
        scope: &Scope,
        incoming: u64,
        usage: &dyn Fn(&Scope) -> u64,
    ) -> Result<Verdict, QuotaError> {
        let mut demands = Vec::new();
        for level in scope.lineage() {
            let Some(&capacity) = self.rules.get(&level) else {
                continue;
            };
            if incoming > capacity {
                return Err(QuotaError::ImpossibleFit {
                    scope: level,
                    capacity,
                    incoming,
                });
            }
            let used = usage(&level);
            if used + incoming > capacity {
                let mode = if level.level() == ScopeLevel::Partition {
                    DemandMode::WithinScope
                } else {
                    DemandMode::RandomAcrossChildren
                };
                demands.push(EvictionDemand {
                    bytes: used + incoming - capacity,
                    scope: level,
                    mode,
                });
            }
        }
        Ok(if demands.is_empty() {
            Verdict::Fits
        } else {
            Verdict::Evict(demands)
        })
    }

    /// Uniform draws without replacement over `candidates` until at least
    /// `bytes` are covered (or the candidates run out). Candidates are sorted
    /// first so the outcome depends only on the set and the seed.
    pub fn random_victims(
        &mut self,
        mut candidates: Vec<(PageId, u64)>,
        bytes: u64,
    ) -> Vec<(PageId, u64)> {
        candidates.sort();
        let mut freed = 0;
        let mut taken = 0;
        while freed < bytes && taken < candidates.len() {
            let j = self.rng.random_range(taken..candidates.len());
            candidates.swap(taken, j);
            freed += candidates[taken].1;
            taken += 1;
        }
        candidates.truncate(taken);
        candidates
    }

    /// Chooses victims for `demand` against live cache state and stops
    /// tracking them in `evictor`. The caller removes them from the index and
    /// the store.
    pub fn select_victims(
        &mut self,
        demand: &EvictionDemand,
        index: &MetadataIndex,
        evictor: &mut Evictor,
    ) -> Vec<(PageId, u64)> {
        match demand.mode {
            DemandMode::WithinScope => {
                let in_scope = |p: &PageId| {
                    index
                        .get(p)
                        .is_some_and(|m| demand.scope.contains(&m.scope))
                };
                let length_of = |p: &PageId| index.get(p).map_or(0, |m| m.length);
                evictor.take_victims(demand.bytes, Some(&in_scope), &length_of)
            }
            DemandMode::RandomAcrossChildren => {
                let candidates = index
                    .pages_by_scope(&demand.scope)
                    .into_iter()
                    .map(|m| (m.page_id.clone(), m.length))
                    .collect();
                let victims = self.random_victims(candidates, demand.bytes);
                for (p, _) in &victims {
                    evictor.remove(p);
                }
                victims
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eviction::PolicyKind;
    use crate::metadata_index::PageMetadata;
    use crate::page_store::{DirId, FileId};

    const GB: u64 = 1 << 30;
    const TB: u64 = 1 << 40;

    fn s(x: &str) -> Scope {
        x.parse().unwrap()
    }

    fn rules() -> QuotaManager {
        QuotaManager::new(
            [
                QuotaRule::new(s("db.t"), TB),
                QuotaRule::new(s("db.t.p1"), 800 * GB),
                QuotaRule::new(s("db.t.p2"), 800 * GB),
            ],
            1,
        )
        .unwrap()
    }

    #[test]
    fn partition_overflow_targets_partition() {
        let q = rules();
        let usage = |sc: &Scope| match sc.to_string().as_str() {
            "db.t.p1" | "db.t" => 800 * GB,
            _ => 0,
        };
        let v = q.check(&s("db.t.p1"), 1, &usage).unwrap();
        assert_eq!(
            v,
            Verdict::Evict(vec![EvictionDemand {
                scope: s("db.t.p1"),
                bytes: 1,
                mode: DemandMode::WithinScope
            }])
        );
    }

    #[test]
    fn table_overflow_is_random_across_children() {
        // Children sum past the parent: 600 GB + 500 GB under a 1 TB table.
        let q = rules();
        let usage = |sc: &Scope| match sc.to_string().as_str() {
            "db.t.p1" => 600 * GB,
            "db.t.p2" => 500 * GB,
            "db.t" => 1100 * GB,
            _ => 0,
        };
        let v = q.check(&s("db.t.p2"), 1, &usage).unwrap();
        let Verdict::Evict(d) = v else {
            panic!("expected eviction")
        };
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].scope, s("db.t"));
        assert_eq!(d[0].mode, DemandMode::RandomAcrossChildren);
        assert_eq!(d[0].bytes, 1100 * GB + 1 - TB);
    }

    #[test]
    fn no_rules_always_fits() {
        let q = QuotaManager::unlimited();
        assert_eq!(
            q.check(&s("a.b.c"), u64::MAX / 2, &|_| u64::MAX / 4)
                .unwrap(),
            Verdict::Fits
        );
    }

    #[test]
    fn impossible_fit() {
        let q = QuotaManager::new([QuotaRule::new(s("a"), 10)], 0).unwrap();
        assert!(matches!(
            q.check(&s("a.b"), 11, &|_| 0),
            Err(QuotaError::ImpossibleFit { .. })
        ));
    }

    #[test]
    fn duplicate_and_zero_rules_rejected() {
        assert!(matches!(
            QuotaManager::new([QuotaRule::new(s("a"), 1), QuotaRule::new(s("a"), 2)], 0),
            Err(QuotaError::DuplicateRule(_))
        ));
        assert!(matches!(
            QuotaManager::new([QuotaRule::new(s(""), 0)], 0),
            Err(QuotaError::ZeroCapacity(_))
        ));
    }

    fn index_with(pages: &[(&str, u64, &str)]) -> (MetadataIndex, Evictor) {
        let mut idx = MetadataIndex::new();
        let mut ev = Evictor::new(PolicyKind::Lru, 0);
        for (i, (file, len, scope)) in pages.iter().enumerate() {
            let id = PageId::new(FileId::derive(file, "1"), i as u64);
            idx.add(PageMetadata::new(id.clone(), *len, s(scope), DirId(0), 0))
                .unwrap();
            ev.insert(&id, None);
        }
        (idx, ev)
    }

    #[test]
    fn partition_demand_stays_in_partition() {
        let mb = 1 << 20;
        let mut pages = vec![("x", mb, "db.t.p2"); 3];
        pages.extend(vec![("y", mb, "db.t.p1"); 5]);
        let (idx, mut ev) = index_with(&pages);
        let mut q = rules();
        let demand = EvictionDemand {
            scope: s("db.t.p1"),
            bytes: 2 * mb,
            mode: DemandMode::WithinScope,
        };
        let v = q.select_victims(&demand, &idx, &mut ev);
        assert_eq!(v.len(), 2);
        assert!(v
            .iter()
            .all(|(p, _)| idx.get(p).unwrap().scope == s("db.t.p1")));
    }

    #[test]
    fn oversized_demand_empties_scope() {
        let (idx, mut ev) = index_with(&[
            ("a", 10, "db.t.p1"),
            ("a", 20, "db.t.p1"),
            ("b", 5, "db.t.p2"),
        ]);
        let mut q = rules();
        let demand = EvictionDemand {
            scope: s("db.t"),
            bytes: 1000,
            mode: DemandMode::RandomAcrossChildren,
        };
        let v = q.select_victims(&demand, &idx, &mut ev);
        assert_eq!(v.iter().map(|(_, l)| l).sum::<u64>(), idx.usage(&s("db.t")));
        assert!(ev.is_empty());
    }

    #[test]
    fn random_across_children_is_uniform_over_pages() {
        // 90 pages in p1, 10 in p2; single-page victims over many trials.
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let mut pages = vec![("p1file", 1u64, "db.t.p1"); 90];
        pages.extend(vec![("p2file", 1u64, "db.t.p2"); 10]);
        let (idx, _) = index_with(&pages);
        let mut q = rules();
        let trials = 5000;
        let mut p1 = 0f64;
        for _ in 0..trials {
            let mut ev = Evictor::new(PolicyKind::Lru, 0);
            let demand = EvictionDemand {
                scope: s("db.t"),
                bytes: 1,
                mode: DemandMode::RandomAcrossChildren,
            };
            let v = q.select_victims(&demand, &idx, &mut ev);
            if idx.get(&v[0].0).unwrap().scope == s("db.t.p1") {
                p1 += 1.0;
            }
        }
        let p2 = trials as f64 - p1;
        let (e1, e2) = (0.9 * trials as f64, 0.1 * trials as f64);
        let chi2 = (p1 - e1).powi(2) / e1 + (p2 - e2).powi(2) / e2;
        let p_value = 1.0 - ChiSquared::new(1.0).unwrap().cdf(chi2);
        assert!(p_value > 0.01, "p1={p1} chi2={chi2} p={p_value}");
    }
}
