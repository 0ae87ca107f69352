//! File-affine split placement on a consistent-hash ring.
//!
//! Every split of a file prefers the same one or two workers, so their local
//! caches see the file repeatedly. Busy workers are skipped, and when both
//! preferred workers are busy the split goes to the least-loaded worker with
//! caching off. A worker that drops out keeps its ring points for a grace
//! period; if it comes back in time nothing moves.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Bound;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::stable_hash;

pub const DEFAULT_VIRTUAL_POINTS: u32 = 100;
pub const DEFAULT_GRACE: Duration = Duration::from_secs(600);
pub const MAX_REPLICAS: usize = 2;

pub type NodeId = String;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum AffinityError {
    #[error("hash ring has no nodes")]
    RingEmpty,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} is already on the ring")]
    DuplicateNode(NodeId),
    #[error("replica count must be 1 or 2, got {0}")]
    BadReplicas(usize),
}

#[derive(Debug, Clone)]
pub struct HashRing {
    points_per_node: u32,
    grace_ms: u64,
    /// Nodes that own points: live ones plus those still in grace.
    nodes: BTreeSet<NodeId>,
    /// Nodes ever added; lets an expired node come back.
    known: BTreeSet<NodeId>,
    offline: BTreeMap<NodeId, u64>,
    ring: BTreeSet<(u64, NodeId)>,
}

impl Default for HashRing {
    fn default() -> Self {
        Self::new(DEFAULT_VIRTUAL_POINTS, DEFAULT_GRACE)
    }
}

fn point(node: &str, i: u32) -> u64 {
    stable_hash(format!("{node}#{i}").as_bytes())
}

impl HashRing {
    pub fn new(points_per_node: u32, grace: Duration) -> Self {
        assert!(points_per_node > 0, "need at least one point per node");
        HashRing {
            points_per_node,
            grace_ms: grace.as_millis() as u64,
            nodes: BTreeSet::new(),
            known: BTreeSet::new(),
            offline: BTreeMap::new(),
            ring: BTreeSet::new(),
        }
    }

    pub fn with_nodes<I, S>(nodes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<NodeId>,
    {
        let mut ring = Self::default();
        for n in nodes {
            let _ = ring.add_node(n);
        }
        ring
    }

    pub fn points_per_node(&self) -> u32 {
        self.points_per_node
    }

    pub fn grace(&self) -> Duration {
        Duration::from_millis(self.grace_ms)
    }

    /// Nodes holding ring points, including those in grace.
    pub fn nodes(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes.iter()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn point_count(&self) -> usize {
        self.ring.len()
    }

    pub fn is_offline(&self, node: &str) -> bool {
        self.offline.contains_key(node)
    }

    pub fn add_node(&mut self, node: impl Into<NodeId>) -> Result<(), AffinityError> {
        let node = node.into();
        if self.nodes.contains(&node) {
            return Err(AffinityError::DuplicateNode(node));
        }
        for i in 0..self.points_per_node {
            self.ring.insert((point(&node, i), node.clone()));
        }
        self.known.insert(node.clone());
        self.nodes.insert(node);
        Ok(())
    }

    /// Removes a node's points at once, skipping the grace period.
    pub fn remove_node(&mut self, node: &str) -> Result<(), AffinityError> {
        if !self.nodes.remove(node) {
            return Err(AffinityError::UnknownNode(node.to_string()));
        }
        self.offline.remove(node);
        for i in 0..self.points_per_node {
            self.ring.remove(&(point(node, i), node.to_string()));
        }
        Ok(())
    }

    /// Marks a node offline until `now + grace`. It keeps its points.
    pub fn node_leave(&mut self, node: &str, now_ms: u64) -> Result<(), AffinityError> {
        if !self.nodes.contains(node) {
            return Err(AffinityError::UnknownNode(node.to_string()));
        }
        self.offline
            .entry(node.to_string())
            .or_insert(now_ms.saturating_add(self.grace_ms));
        Ok(())
    }

    /// Brings a node back. Within grace nothing on the ring changes; after
    /// expiry its points are re-added at the same positions.
    pub fn node_return(&mut self, node: &str, _now_ms: u64) -> Result<(), AffinityError> {
        if self.offline.remove(node).is_some() {
            return Ok(());
        }
        if self.nodes.contains(node) {
            return Ok(());
        }
        if self.known.contains(node) {
            return self.add_node(node);
        }
        Err(AffinityError::UnknownNode(node.to_string()))
    }

    /// Removes the points of every node whose grace deadline has passed.
    pub fn expire_grace(&mut self, now_ms: u64) -> Vec<NodeId> {
        let expired: Vec<NodeId> = self
            .offline
            .iter()
            .filter(|(_, &deadline)| deadline <= now_ms)
            .map(|(n, _)| n.clone())
            .collect();
        for n in &expired {
            self.remove_node(n).expect("offline nodes are on the ring");
        }
        expired
    }

    /// The first `replicas` distinct nodes clockwise from the file's hash.
    pub fn preferred_nodes(
        &self,
        file_id: &str,
        replicas: usize,
    ) -> Result<Vec<NodeId>, AffinityError> {
        if !(1..=MAX_REPLICAS).contains(&replicas) {
            return Err(AffinityError::BadReplicas(replicas));
        }
        if self.ring.is_empty() {
            return Err(AffinityError::RingEmpty);
        }
        let h = stable_hash(file_id.as_bytes());
        let start = (h, NodeId::new());
        let mut out: Vec<NodeId> = Vec::with_capacity(replicas);
        let clockwise = self
            .ring
            .range((Bound::Included(&start), Bound::Unbounded))
            .chain(self.ring.iter());
        for (_, node) in clockwise {
            if !out.contains(node) {
                out.push(node.clone());
                if out.len() == replicas.min(self.nodes.len()) {
                    break;
                }
            }
        }
        Ok(out)
    }

    pub fn primary(&self, file_id: &str) -> Result<NodeId, AffinityError> {
        Ok(self.preferred_nodes(file_id, 1)?.remove(0))
    }

    /// Places one split of `file_id` given a snapshot of worker loads.
    /// Nodes missing from `loads` and nodes in grace count as busy.
    pub fn assign_split(
        &self,
        file_id: &str,
        loads: &HashMap<NodeId, WorkerLoad>,
    ) -> Result<Assignment, AffinityError> {
        let preferred = self.preferred_nodes(file_id, MAX_REPLICAS)?;
        let busy =
            |n: &NodeId| self.offline.contains_key(n) || loads.get(n).is_none_or(WorkerLoad::busy);
        for (node, choice) in preferred.iter().zip([Choice::Primary, Choice::Secondary]) {
            if !busy(node) {
                return Ok(Assignment {
                    node_id: node.clone(),
                    cache_enabled: true,
                    choice,
                });
            }
        }
        let load = |n: &NodeId| loads.get(n).map_or(u64::MAX, WorkerLoad::total);
        let least = |candidates: &mut dyn Iterator<Item = &NodeId>| {
            candidates
                .min_by(|a, b| load(a).cmp(&load(b)).then(a.cmp(b)))
                .cloned()
        };
        let node = least(&mut self.nodes.iter().filter(|n| !busy(n)))
            .or_else(|| least(&mut self.nodes.iter().filter(|n| !self.offline.contains_key(*n))))
            .or_else(|| least(&mut self.nodes.iter()))
            .ok_or(AffinityError::RingEmpty)?;
        Ok(Assignment {
            node_id: node,
            cache_enabled: false,
            choice: Choice::Fallback,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerLoad {
    pub assigned_splits: u64,
    pub pending_splits: u64,
    pub max_splits_per_node: u64,
    pub max_pending_splits_per_task: u64,
}

impl WorkerLoad {
    pub fn new(max_splits_per_node: u64, max_pending_splits_per_task: u64) -> Self {
        WorkerLoad {
            assigned_splits: 0,
            pending_splits: 0,
            max_splits_per_node,
            max_pending_splits_per_task,
        }
    }

    /// Each counter checked against its own limit.
    pub fn busy(&self) -> bool {
        self.assigned_splits >= self.max_splits_per_node
            || self.pending_splits >= self.max_pending_splits_per_task
    }

    pub fn total(&self) -> u64 {
        self.assigned_splits + self.pending_splits
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Choice {
    Primary,
    Secondary,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub node_id: NodeId,
    /// Off exactly when the split fell back to a non-preferred node.
    pub cache_enabled: bool,
    pub choice: Choice,
}
