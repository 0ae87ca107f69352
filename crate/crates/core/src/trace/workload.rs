//! Skewed synthetic workloads: Zipf object popularity with a small-read
//! heavy size mixture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::TraceEntry;
use crate::hashing::stable_hash;
use crate::scope::Scope;

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
}

/// Three log-uniform size bands. A read falls in the small band with
/// probability `small_fraction`, the medium band with `medium_fraction`,
/// otherwise the large band; every size is clipped to the object size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadSizeMix {
    pub min_bytes: u64,
    pub small_max_bytes: u64,
    pub small_fraction: f64,
    pub medium_max_bytes: u64,
    pub medium_fraction: f64,
    pub large_max_bytes: u64,
}

impl Default for ReadSizeMix {
    fn default() -> Self {
        ReadSizeMix {
            min_bytes: 256,
            small_max_bytes: 10 * 1024,
            small_fraction: 0.6,
            medium_max_bytes: 1 << 20,
            medium_fraction: 0.33,
            large_max_bytes: 8 << 20,
        }
    }
}

impl ReadSizeMix {
    fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::InvalidSpec(m.to_string()));
        if self.min_bytes == 0 {
            return bad("min_bytes must be positive");
        }
        if !(self.min_bytes <= self.small_max_bytes
            && self.small_max_bytes <= self.medium_max_bytes
            && self.medium_max_bytes <= self.large_max_bytes)
        {
            return bad("size band bounds must be non-decreasing");
        }
        let ok = |f: f64| (0.0..=1.0).contains(&f);
        if !ok(self.small_fraction) || !ok(self.medium_fraction) || self.small_fraction + self.medium_fraction > 1.0 + 1e-12 {
            return bad("band fractions must be in [0, 1] and sum to at most 1");
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> u64 {
        let u: f64 = rng.random();
        let (lo, hi) = if u < self.small_fraction {
            (self.min_bytes, self.small_max_bytes)
        } else if u < self.small_fraction + self.medium_fraction {
            (self.small_max_bytes, self.medium_max_bytes)
        } else {
            (self.medium_max_bytes, self.large_max_bytes)
        };
        log_uniform(rng, lo, hi)
    }
}

fn log_uniform(rng: &mut impl Rng, lo: u64, hi: u64) -> u64 {
    if lo >= hi {
        return lo;
    }
    let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
    let x = (a + rng.random::<f64>() * (b - a)).exp().round() as u64;
    x.clamp(lo, hi)
}

/// How objects map to tenant scopes. Each object lands in one partition
/// chosen by hashing its name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScopeLayout {
    pub schemas: u32,
    pub tables_per_schema: u32,
    pub partitions_per_table: u32,
}

impl ScopeLayout {
    pub fn scope_of(&self, object: &str) -> Scope {
        let h = stable_hash(object.as_bytes());
        let s = h % u64::from(self.schemas);
        let t = (h / u64::from(self.schemas)) % u64::from(self.tables_per_schema);
        let p = (h / u64::from(self.schemas) / u64::from(self.tables_per_schema)) % u64::from(self.partitions_per_table);
        Scope::partition(&format!("s{s}"), &format!("t{t}"), &format!("p{p}")).expect("generated labels are valid")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZipfWorkloadSpec {
    pub object_count: u64,
    /// Popularity of rank r is proportional to r^-zipf_s; 0 is uniform.
    pub zipf_s: f64,
    pub request_count: u64,
    #[serde(default = "default_object_size")]
    pub object_size_bytes: u64,
    #[serde(default)]
    pub read_sizes: ReadSizeMix,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_inter_arrival")]
    pub inter_arrival_ms: u64,
    #[serde(default)]
    pub start_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scopes: Option<ScopeLayout>,
    /// Requests are split evenly into this many runs, `run0`, `run1`, ...
    #[serde(default = "default_runs")]
    pub runs: u64,
}

fn default_object_size() -> u64 {
    8 << 20
}
fn default_inter_arrival() -> u64 {
    10
}
fn default_runs() -> u64 {
    1
}

impl ZipfWorkloadSpec {
    pub fn new(object_count: u64, zipf_s: f64, request_count: u64, seed: u64) -> Self {
        ZipfWorkloadSpec {
            object_count,
            zipf_s,
            request_count,
            object_size_bytes: default_object_size(),
            read_sizes: ReadSizeMix::default(),
            seed,
            inter_arrival_ms: default_inter_arrival(),
            start_ms: 0,
            scopes: None,
            runs: default_runs(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, WorkloadError> {
        let spec: ZipfWorkloadSpec =
            serde_json::from_str(text).map_err(|e| WorkloadError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::InvalidSpec(m.to_string()));
        if self.object_count == 0 {
            return bad("object_count must be positive");
        }
        if !(self.zipf_s.is_finite() && self.zipf_s >= 0.0) {
            return bad("zipf_s must be a finite non-negative number");
        }
        if self.object_size_bytes == 0 {
            return bad("object_size_bytes must be positive");
        }
        if self.runs == 0 {
            return bad("runs must be positive");
        }
        if let Some(l) = &self.scopes {
            if l.schemas == 0 || l.tables_per_schema == 0 || l.partitions_per_table == 0 {
                return bad("scope layout counts must be positive");
            }
        }
        self.read_sizes.validate()
    }

    /// Name of the object at popularity rank `rank` (1-based).
    pub fn object_name(rank: u64) -> String {
        format!("obj-{rank:07}")
    }
}

/// Emits `request_count` requests, deterministic in the spec.
pub fn generate(spec: &ZipfWorkloadSpec) -> Result<Vec<TraceEntry>, WorkloadError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let zipf = Zipf::new(spec.object_count as f64, spec.zipf_s)
        .map_err(|e| WorkloadError::InvalidSpec(format!("zipf: {e}")))?;
    let mut out = Vec::with_capacity(spec.request_count as usize);
    for i in 0..spec.request_count {
        let rank = (zipf.sample(&mut rng) as u64).clamp(1, spec.object_count);
        let name = ZipfWorkloadSpec::object_name(rank);
        let length = spec.read_sizes.sample(&mut rng).min(spec.object_size_bytes);
        let offset = rng.random_range(0..=spec.object_size_bytes - length);
        let scope = spec.scopes.as_ref().map(|l| l.scope_of(&name)).unwrap_or_default();
        out.push(TraceEntry {
            timestamp_ms: spec.start_ms + i * spec.inter_arrival_ms,
            file_id: name,
            offset,
            length,
            scope,
            run_id: format!("run{}", i * spec.runs / spec.request_count.max(1)),
        });
    }
    Ok(out)
}
