//! Victim selection: FIFO, LRU and seeded RANDOM behind one trait, plus TTL
//! expiry tracking.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::page_store::PageId;

pub type PageFilter<'a> = &'a dyn Fn(&PageId) -> bool;

/// Tracks pages and proposes eviction victims.
///
/// `victims` only returns tracked pages that pass the filter, without
/// duplicates, and does not stop tracking them.
pub trait EvictionPolicy: Send {
    fn on_insert(&mut self, page: &PageId);
    fn on_access(&mut self, page: &PageId);
    fn on_remove(&mut self, page: &PageId);
    fn victims(&mut self, n: usize, filter: Option<PageFilter<'_>>) -> Vec<PageId>;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn contains(&self, page: &PageId) -> bool;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Fifo,
    #[default]
    Lru,
    Random,
}

impl PolicyKind {
    pub fn build(self, seed: u64) -> Box<dyn EvictionPolicy> {
        match self {
            PolicyKind::Fifo => Box::new(OrderedPolicy::fifo()),
            PolicyKind::Lru => Box::new(OrderedPolicy::lru()),
            PolicyKind::Random => Box::new(RandomPolicy::new(seed)),
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::Fifo => "fifo",
            PolicyKind::Lru => "lru",
            PolicyKind::Random => "random",
        })
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fifo" => Ok(PolicyKind::Fifo),
            "lru" => Ok(PolicyKind::Lru),
            "random" => Ok(PolicyKind::Random),
            other => Err(format!(
                "unknown eviction policy `{other}` (expected lru, fifo or random)"
            )),
        }
    }
}

/// FIFO and LRU share one structure: a monotonically increasing stamp per
/// page. LRU refreshes the stamp on access, FIFO does not.
#[derive(Debug, Default)]
pub struct OrderedPolicy {
    refresh_on_access: bool,
    next: u64,
    order: BTreeMap<u64, PageId>,
    stamps: HashMap<PageId, u64>,
}

impl OrderedPolicy {
    pub fn lru() -> Self {
        OrderedPolicy {
            refresh_on_access: true,
            ..Default::default()
        }
    }

    pub fn fifo() -> Self {
        OrderedPolicy::default()
    }

    fn stamp(&mut self, page: &PageId) {
        let s = self.next;
        self.next += 1;
        if let Some(old) = self.stamps.insert(page.clone(), s) {
            self.order.remove(&old);
        }
        self.order.insert(s, page.clone());
    }
}

impl EvictionPolicy for OrderedPolicy {
    fn on_insert(&mut self, page: &PageId) {
        self.stamp(page);
    }

    fn on_access(&mut self, page: &PageId) {
        if self.refresh_on_access && self.stamps.contains_key(page) {
            self.stamp(page);
        }
    }

    fn on_remove(&mut self, page: &PageId) {
        if let Some(s) = self.stamps.remove(page) {
            self.order.remove(&s);
        }
    }

    fn victims(&mut self, n: usize, filter: Option<PageFilter<'_>>) -> Vec<PageId> {
        self.order
            .values()
            .filter(|p| filter.is_none_or(|f| f(p)))
            .take(n)
            .cloned()
            .collect()
    }

    fn len(&self) -> usize {
        self.stamps.len()
    }

    fn contains(&self, page: &PageId) -> bool {
        self.stamps.contains_key(page)
    }
}

/// Uniform choice without replacement, reproducible under a seed.
#[derive(Debug)]
pub struct RandomPolicy {
    pages: Vec<PageId>,
    slots: HashMap<PageId, usize>,
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        RandomPolicy {
            pages: Vec::new(),
            slots: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl EvictionPolicy for RandomPolicy {
    fn on_insert(&mut self, page: &PageId) {
        if self.slots.contains_key(page) {
            return;
        }
        self.slots.insert(page.clone(), self.pages.len());
        self.pages.push(page.clone());
    }

    fn on_access(&mut self, _page: &PageId) {}

    fn on_remove(&mut self, page: &PageId) {
        if let Some(slot) = self.slots.remove(page) {
            self.pages.swap_remove(slot);
            if let Some(moved) = self.pages.get(slot) {
                self.slots.insert(moved.clone(), slot);
            }
        }
    }

    fn victims(&mut self, n: usize, filter: Option<PageFilter<'_>>) -> Vec<PageId> {
        let mut candidates: Vec<&PageId> = match filter {
            Some(f) => self.pages.iter().filter(|p| f(p)).collect(),
            None => self.pages.iter().collect(),
        };
        let take = n.min(candidates.len());
        // Partial Fisher-Yates.
        for i in 0..take {
            let j = self.rng.random_range(i..candidates.len());
            candidates.swap(i, j);
        }
        candidates[..take].iter().map(|p| (*p).clone()).collect()
    }

    fn len(&self) -> usize {
        self.pages.len()
    }

    fn contains(&self, page: &PageId) -> bool {
        self.slots.contains_key(page)
    }
}

/// Expiry deadlines for pages that carry a TTL.
#[derive(Debug, Default)]
pub struct TtlTracker {
    by_deadline: BTreeSet<(u64, PageId)>,
    deadlines: HashMap<PageId, u64>,
}

impl TtlTracker {
    pub fn insert(&mut self, page: &PageId, expires_at_ms: u64) {
        self.remove(page);
        self.by_deadline.insert((expires_at_ms, page.clone()));
        self.deadlines.insert(page.clone(), expires_at_ms);
    }

    pub fn remove(&mut self, page: &PageId) {
        if let Some(d) = self.deadlines.remove(page) {
            self.by_deadline.remove(&(d, page.clone()));
        }
    }

    /// Pages with deadline ≤ `now_ms`, earliest first; they stop being tracked.
    pub fn take_expired(&mut self, now_ms: u64) -> Vec<PageId> {
        let mut out = Vec::new();
        while let Some((d, _)) = self.by_deadline.first() {
            if *d > now_ms {
                break;
            }
            let (_, page) = self.by_deadline.pop_first().expect("checked non-empty");
            self.deadlines.remove(&page);
            out.push(page);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.deadlines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deadlines.is_empty()
    }
}

/// A policy plus TTL bookkeeping: the single tracker the cache talks to.
pub struct Evictor {
    kind: PolicyKind,
    policy: Box<dyn EvictionPolicy>,
    ttl: TtlTracker,
}

impl fmt::Debug for Evictor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Evictor")
            .field("kind", &self.kind)
            .field("tracked", &self.policy.len())
            .field("ttl", &self.ttl.len())
            .finish()
    }
}

impl Evictor {
    pub fn new(kind: PolicyKind, seed: u64) -> Self {
        Evictor {
            kind,
            policy: kind.build(seed),
            ttl: TtlTracker::default(),
        }
    }

    /// Wraps a caller-supplied policy.
    pub fn with_policy(kind: PolicyKind, policy: Box<dyn EvictionPolicy>) -> Self {
        Evictor {
            kind,
            policy,
            ttl: TtlTracker::default(),
        }
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn insert(&mut self, page: &PageId, expires_at_ms: Option<u64>) {
        self.policy.on_insert(page);
        if let Some(d) = expires_at_ms {
            self.ttl.insert(page, d);
        }
    }

    pub fn access(&mut self, page: &PageId) {
        self.policy.on_access(page);
    }

    pub fn remove(&mut self, page: &PageId) {
        self.policy.on_remove(page);
        self.ttl.remove(page);
    }

    pub fn victims(&mut self, n: usize, filter: Option<PageFilter<'_>>) -> Vec<PageId> {
        self.policy.victims(n, filter)
    }

    /// Expired pages, no longer tracked. The caller deletes them from the
    /// store and index. Idempotent for a fixed `now_ms`.
    pub fn ttl_sweep(&mut self, now_ms: u64) -> Vec<PageId> {
        let expired = self.ttl.take_expired(now_ms);
        for p in &expired {
            self.policy.on_remove(p);
        }
        expired
    }

    pub fn len(&self) -> usize {
        self.policy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policy.is_empty()
    }

    pub fn contains(&self, page: &PageId) -> bool {
        self.policy.contains(page)
    }

    /// Pulls victims in policy order until their lengths cover `needed`
    /// bytes, and stops tracking them. Batches grow geometrically, so the
    /// common single-page case asks the policy for one victim.
    ///
    /// Deterministic for a fixed sequence of prior calls, which is what lets
    /// the in-memory simulator reproduce the cache's choices exactly.
    pub fn take_victims(
        &mut self,
        needed: u64,
        filter: Option<PageFilter<'_>>,
        length_of: &dyn Fn(&PageId) -> u64,
    ) -> Vec<(PageId, u64)> {
        let mut out = Vec::new();
        let mut freed = 0u64;
        let mut batch = 1usize;
        while freed < needed {
            let picked = self.policy.victims(batch, filter);
            if picked.is_empty() {
                break;
            }
            for page in picked {
                if freed >= needed {
                    break;
                }
                let len = length_of(&page);
                self.remove(&page);
                freed += len;
                out.push((page, len));
            }
            batch = batch.saturating_mul(2);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::page_store::FileId;
    use proptest::prelude::*;

    fn p(name: &str) -> PageId {
        PageId::new(FileId::derive(name, "1"), 0)
    }

    #[test]
    fn lru_evicts_least_recent() {
        let mut lru = OrderedPolicy::lru();
        for n in ["A", "B", "C"] {
            lru.on_insert(&p(n));
        }
        lru.on_access(&p("A"));
        assert_eq!(lru.victims(1, None), vec![p("B")]);
        assert_eq!(lru.victims(10, None), vec![p("B"), p("C"), p("A")]);
    }

    #[test]
    fn fifo_ignores_access() {
        let mut fifo = OrderedPolicy::fifo();
        fifo.on_insert(&p("A"));
        fifo.on_insert(&p("B"));
        fifo.on_access(&p("A"));
        assert_eq!(fifo.victims(1, None), vec![p("A")]);
    }

    #[test]
    fn filter_restricts_victims() {
        let mut lru = OrderedPolicy::lru();
        for n in ["A", "B", "C"] {
            lru.on_insert(&p(n));
        }
        let only_c = |x: &PageId| *x == p("C");
        assert_eq!(lru.victims(5, Some(&only_c)), vec![p("C")]);
        let mut rnd = RandomPolicy::new(1);
        for n in ["A", "B", "C"] {
            rnd.on_insert(&p(n));
        }
        assert_eq!(rnd.victims(5, Some(&only_c)), vec![p("C")]);
    }

    #[test]
    fn random_is_reproducible_under_seed() {
        let run = |seed| {
            let mut r = RandomPolicy::new(seed);
            for i in 0..100 {
                r.on_insert(&p(&i.to_string()));
            }
            r.victims(10, None)
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42), run(43));
        let v = run(42);
        let uniq: BTreeSet<_> = v.iter().collect();
        assert_eq!(uniq.len(), 10);
    }

    #[test]
    fn random_selection_is_uniform() {
        // 1,000 pages, 10^4 single-victim draws; chi-square against uniform.
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let mut r = RandomPolicy::new(9);
        let pages: Vec<PageId> = (0..1000).map(|i| p(&i.to_string())).collect();
        for pg in &pages {
            r.on_insert(pg);
        }
        let index: HashMap<&PageId, usize> =
            pages.iter().enumerate().map(|(i, p)| (p, i)).collect();
        let mut counts = vec![0f64; 1000];
        let trials = 10_000;
        for _ in 0..trials {
            let v = r.victims(1, None);
            counts[index[&v[0]]] += 1.0;
        }
        let expected = trials as f64 / 1000.0;
        let chi2: f64 = counts
            .iter()
            .map(|c| (c - expected).powi(2) / expected)
            .sum();
        let p_value = 1.0 - ChiSquared::new(999.0).unwrap().cdf(chi2);
        assert!(p_value > 0.01, "chi2 {chi2} p {p_value}");
    }

    #[test]
    fn ttl_boundary_is_inclusive() {
        let mut ev = Evictor::new(PolicyKind::Lru, 0);
        ev.insert(&p("A"), Some(60_000));
        ev.insert(&p("B"), None);
        assert!(ev.ttl_sweep(59_000).is_empty());
        assert_eq!(ev.ttl_sweep(60_000), vec![p("A")]);
        assert!(ev.ttl_sweep(60_000).is_empty());
        assert!(!ev.contains(&p("A")));
        assert!(ev.contains(&p("B")));
        assert!(ev.ttl_sweep(u64::MAX).is_empty());
    }

    #[test]
    fn take_victims_covers_bytes() {
        let mut ev = Evictor::new(PolicyKind::Lru, 0);
        for i in 0..5 {
            ev.insert(&p(&i.to_string()), None);
        }
        let v = ev.take_victims(250, None, &|_| 100);
        assert_eq!(v.len(), 3);
        assert_eq!(ev.len(), 2);
        let v = ev.take_victims(10_000, None, &|_| 100);
        assert_eq!(v.len(), 2);
        assert!(ev.is_empty());
    }

    #[derive(Debug, Clone)]
    enum Op {
        Insert(u8),
        Access(u8),
        Remove(u8),
    }

    proptest! {
        #[test]
        fn lru_matches_brute_force_recency(ops in proptest::collection::vec(
            prop_oneof![(0u8..20).prop_map(Op::Insert), (0u8..20).prop_map(Op::Access), (0u8..20).prop_map(Op::Remove)],
            1..300,
        )) {
            let mut lru = OrderedPolicy::lru();
            let mut fifo = OrderedPolicy::fifo();
            // Brute force: (last access time, insertion time) per live page.
            let mut last: HashMap<u8, (u64, u64)> = HashMap::new();
            for (t, op) in ops.into_iter().enumerate() {
                let t = t as u64;
                match op {
                    Op::Insert(k) => {
                        lru.on_insert(&p(&k.to_string()));
                        fifo.on_insert(&p(&k.to_string()));
                        last.insert(k, (t, t));
                    }
                    Op::Access(k) => {
                        lru.on_access(&p(&k.to_string()));
                        fifo.on_access(&p(&k.to_string()));
                        if let Some(e) = last.get_mut(&k) {
                            e.0 = t;
                        }
                    }
                    Op::Remove(k) => {
                        lru.on_remove(&p(&k.to_string()));
                        fifo.on_remove(&p(&k.to_string()));
                        last.remove(&k);
                    }
                }
            }
            let mut by_recency: Vec<(u64, u8)> = last.iter().map(|(k, (a, _))| (*a, *k)).collect();
            by_recency.sort();
            let expect: Vec<PageId> = by_recency.iter().map(|(_, k)| p(&k.to_string())).collect();
            prop_assert_eq!(lru.victims(usize::MAX, None), expect);
            let mut by_insert: Vec<(u64, u8)> = last.iter().map(|(k, (_, i))| (*i, *k)).collect();
            by_insert.sort();
            let expect: Vec<PageId> = by_insert.iter().map(|(_, k)| p(&k.to_string())).collect();
            prop_assert_eq!(fifo.victims(usize::MAX, None), expect);
        }

        #[test]
        fn ttl_sweep_matches_filter(ttls in proptest::collection::vec(proptest::option::of(0u64..1000), 1..60), now in 0u64..1500) {
            let mut ev = Evictor::new(PolicyKind::Fifo, 0);
            for (i, ttl) in ttls.iter().enumerate() {
                ev.insert(&p(&i.to_string()), ttl.map(|t| 100 + t));
            }
            let got: BTreeSet<PageId> = ev.ttl_sweep(now).into_iter().collect();
            let expect: BTreeSet<PageId> = ttls
                .iter()
                .enumerate()
                .filter(|(_, t)| t.is_some_and(|t| 100 + t <= now))
                .map(|(i, _)| p(&i.to_string()))
                .collect();
            prop_assert_eq!(got, expect);
        }
    }
}
