//! Embeddable local page cache for remote data lake reads.

pub mod admission;
pub mod affinity;
pub mod block_adapter;
pub mod cache_manager;
pub mod clock;
pub mod eviction;
pub(crate) mod executor;
pub mod faults;
pub mod hashing;
pub mod metadata_index;
pub mod metrics;
pub mod page_store;
pub mod quota;
pub mod scope;
pub mod trace;
