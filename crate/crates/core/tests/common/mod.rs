#![allow(dead_code)]

use std::path::Path;

use edgecache::cache_manager::{CacheConfig, DirConfig};
use edgecache::trace::{generate, ReadSizeMix, ScopeLayout, TraceEntry, ZipfWorkloadSpec};

pub const PAGE: u64 = 4096;
pub const OBJECT_SIZE: u64 = 64 * 1024;

/// Read sizes scaled down to 64 KiB objects: mostly sub-page reads, some
/// multi-page ones.
pub fn small_reads() -> ReadSizeMix {
    ReadSizeMix {
        min_bytes: 16,
        small_max_bytes: 2048,
        small_fraction: 0.6,
        medium_max_bytes: 16 * 1024,
        medium_fraction: 0.33,
        large_max_bytes: OBJECT_SIZE,
    }
}

pub fn random_trace(seed: u64, objects: u64, requests: u64, scoped: bool) -> Vec<TraceEntry> {
    let mut spec = ZipfWorkloadSpec::new(objects, 0.9, requests, seed);
    spec.object_size_bytes = OBJECT_SIZE;
    spec.read_sizes = small_reads();
    spec.inter_arrival_ms = 50;
    spec.runs = 4;
    if scoped {
        spec.scopes = Some(ScopeLayout {
            schemas: 2,
            tables_per_schema: 2,
            partitions_per_table: 4,
        });
    }
    generate(&spec).expect("valid spec")
}

/// One directory per entry of `capacities`, under `root`.
pub fn config(root: &Path, capacities: &[u64]) -> CacheConfig {
    let mut cfg = CacheConfig::single_dir(root.join("d0"), capacities[0]);
    cfg.dirs = capacities
        .iter()
        .enumerate()
        .map(|(i, &c)| DirConfig {
            path: root.join(format!("d{i}")),
            capacity_bytes: c,
        })
        .collect();
    cfg.page_size_bytes = PAGE;
    cfg.bucket_count = 16;
    cfg
}

/// A scratch directory, on tmpfs when the host has one: cache tests create
/// tens of thousands of small files.
pub fn scratch_dir() -> tempfile::TempDir {
    let shm = Path::new("/dev/shm");
    if shm.is_dir() {
        if let Ok(d) = tempfile::Builder::new().prefix("edgecache-").tempdir_in(shm) {
            return d;
        }
    }
    tempfile::tempdir().expect("temp dir")
}
