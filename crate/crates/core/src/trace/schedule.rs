//! Drives the affinity scheduler over a trace, one split per request.
//!
//! Load evolves synthetically: each split stays on its node for a random
//! number of subsequent requests, and counts as pending for the first few.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TraceEntry;
use crate::affinity::{AffinityError, Choice, HashRing, NodeId, WorkerLoad, MAX_REPLICAS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChurnKind {
    /// Goes offline; keeps its ring points until grace runs out.
    Leave,
    /// Comes back, whether or not grace has run out.
    Return,
    /// Leaves for good right away.
    Remove,
    /// Ends the grace period of every offline node now.
    Expire,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChurnEvent {
    pub at_request_index: usize,
    #[serde(default)]
    pub node: String,
    pub kind: ChurnKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleOptions {
    pub node_count: usize,
    pub churn: Vec<ChurnEvent>,
    pub max_splits_per_node: u64,
    pub max_pending_splits_per_task: u64,
    /// Mean number of requests a split stays on its node.
    pub split_lifetime: u64,
    /// Requests during which a new split still counts as pending.
    pub pending_window: u64,
    pub virtual_points_per_node: u32,
    pub grace_ms: u64,
    pub seed: u64,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        ScheduleOptions {
            node_count: 1,
            churn: Vec::new(),
            max_splits_per_node: u64::MAX,
            max_pending_splits_per_task: u64::MAX,
            split_lifetime: 10,
            pending_window: 2,
            virtual_points_per_node: crate::affinity::DEFAULT_VIRTUAL_POINTS,
            grace_ms: crate::affinity::DEFAULT_GRACE.as_millis() as u64,
            seed: 0,
        }
    }
}

impl ScheduleOptions {
    pub fn new(node_count: usize) -> Self {
        ScheduleOptions {
            node_count,
            ..Default::default()
        }
    }

    pub fn node_name(i: usize) -> NodeId {
        format!("node-{i:03}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemapEvent {
    pub at_request_index: usize,
    pub event: ChurnEvent,
    /// Fraction of the trace's distinct files whose primary node changed.
    pub remap_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub splits: u64,
    pub per_node: BTreeMap<NodeId, u64>,
    /// Split landed on one of the file's preferred nodes.
    pub affinity_hit_fraction: f64,
    pub primary_fraction: f64,
    pub secondary_fraction: f64,
    pub fallback_fraction: f64,
    pub remaps: Vec<RemapEvent>,
}

impl ScheduleReport {
    pub fn share(&self, node: &str) -> f64 {
        let n = self.per_node.get(node).copied().unwrap_or(0);
        if self.splits == 0 {
            0.0
        } else {
            n as f64 / self.splits as f64
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }
}

struct Running {
    node: NodeId,
    started: usize,
    ends: usize,
}

fn primaries(ring: &HashRing, files: &BTreeSet<&str>) -> Result<Vec<NodeId>, AffinityError> {
    files.iter().map(|f| ring.primary(f)).collect()
}

pub fn schedule_sim(entries: &[TraceEntry], options: &ScheduleOptions) -> Result<ScheduleReport, AffinityError> {
    if options.node_count == 0 {
        return Err(AffinityError::RingEmpty);
    }
    let mut ring = HashRing::new(
        options.virtual_points_per_node,
        std::time::Duration::from_millis(options.grace_ms),
    );
    for i in 0..options.node_count {
        ring.add_node(ScheduleOptions::node_name(i))?;
    }
    let files: BTreeSet<&str> = entries.iter().map(|e| e.file_id.as_str()).collect();
    let mut churn = options.churn.clone();
    churn.sort_by_key(|c| c.at_request_index);
    let mut churn = churn.into_iter().peekable();

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut running: Vec<Running> = Vec::new();
    let mut per_node: BTreeMap<NodeId, u64> = ring.nodes().map(|n| (n.clone(), 0)).collect();
    let mut remaps = Vec::new();
    let (mut affine, mut primary, mut secondary, mut fallback) = (0u64, 0u64, 0u64, 0u64);

    for (i, e) in entries.iter().enumerate() {
        while churn.peek().is_some_and(|c| c.at_request_index <= i) {
            let c = churn.next().expect("peeked");
            let before = primaries(&ring, &files)?;
            match c.kind {
                ChurnKind::Leave => ring.node_leave(&c.node, e.timestamp_ms)?,
                ChurnKind::Return => ring.node_return(&c.node, e.timestamp_ms)?,
                ChurnKind::Remove => ring.remove_node(&c.node)?,
                ChurnKind::Expire => {
                    ring.expire_grace(u64::MAX);
                }
            }
            let after = primaries(&ring, &files)?;
            let moved = before.iter().zip(&after).filter(|(a, b)| a != b).count();
            remaps.push(RemapEvent {
                at_request_index: i,
                event: c,
                remap_fraction: if files.is_empty() {
                    0.0
                } else {
                    moved as f64 / files.len() as f64
                },
            });
        }
        ring.expire_grace(e.timestamp_ms);
        running.retain(|r| r.ends > i);

        let mut loads: HashMap<NodeId, WorkerLoad> = ring
            .nodes()
            .map(|n| {
                (
                    n.clone(),
                    WorkerLoad::new(options.max_splits_per_node, options.max_pending_splits_per_task),
                )
            })
            .collect();
        for r in &running {
            if let Some(l) = loads.get_mut(&r.node) {
                l.assigned_splits += 1;
                if (i - r.started) < options.pending_window as usize {
                    l.pending_splits += 1;
                }
            }
        }

        let a = ring.assign_split(&e.file_id, &loads)?;
        let preferred = ring.preferred_nodes(&e.file_id, MAX_REPLICAS)?;
        if preferred.contains(&a.node_id) {
            affine += 1;
        }
        match a.choice {
            Choice::Primary => primary += 1,
            Choice::Secondary => secondary += 1,
            Choice::Fallback => fallback += 1,
        }
        *per_node.entry(a.node_id.clone()).or_default() += 1;
        let life = rng.random_range(1..=options.split_lifetime.max(1) * 2) as usize;
        running.push(Running {
            node: a.node_id,
            started: i,
            ends: i + life,
        });
    }

    let n = entries.len() as f64;
    let frac = |x: u64| if entries.is_empty() { 0.0 } else { x as f64 / n };
    Ok(ScheduleReport {
        splits: entries.len() as u64,
        per_node,
        affinity_hit_fraction: frac(affine),
        primary_fraction: frac(primary),
        secondary_fraction: frac(secondary),
        fallback_fraction: frac(fallback),
        remaps,
    })
}
