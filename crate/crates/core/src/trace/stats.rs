use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{rank_frequencies, TraceEntry};

/// Ranks whose count falls below this are left out of the slope fit; their
/// frequencies are dominated by sampling noise.
pub const SLOPE_MIN_COUNT: u64 = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub requests: u64,
    pub unique_objects: u64,
    pub bytes_requested: u64,
    /// Share of requests going to the most popular 1% (at least one) of the
    /// objects that appear in the trace.
    pub top1pct_share: f64,
    /// Fitted log-log rank-frequency slope, if enough ranks qualify.
    pub zipf_slope: Option<f64>,
    pub size_p50: u64,
    pub size_p90: u64,
    pub size_p99: u64,
    pub unique_scopes: u64,
    pub runs: u64,
}

/// Nearest-rank percentile of `sorted` (ascending), `p` in (0, 1].
pub fn percentile(sorted: &[u64], p: f64) -> Option<u64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (p * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

/// Least-squares slope of ln(count) against ln(rank) over the ranks whose
/// count is at least `min_count`. `counts` must be sorted descending.
pub fn fit_zipf_slope(counts: &[u64], min_count: u64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = counts
        .iter()
        .take_while(|&&c| c >= min_count.max(1))
        .enumerate()
        .map(|(i, &c)| (((i + 1) as f64).ln(), (c as f64).ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

pub fn characterize(entries: &[TraceEntry]) -> TraceStats {
    let freqs = rank_frequencies(entries);
    let counts: Vec<u64> = freqs.iter().map(|(_, c)| *c).collect();
    let top = counts.len().div_ceil(100).max(1);
    let top_reads: u64 = counts.iter().take(top).sum();
    let mut sizes: Vec<u64> = entries.iter().map(|e| e.length).collect();
    sizes.sort_unstable();
    let scopes: HashSet<String> = entries.iter().map(|e| e.scope.to_string()).collect();
    let runs: HashSet<&str> = entries.iter().map(|e| e.run_id.as_str()).collect();
    TraceStats {
        requests: entries.len() as u64,
        unique_objects: counts.len() as u64,
        bytes_requested: sizes.iter().sum(),
        top1pct_share: if entries.is_empty() {
            0.0
        } else {
            top_reads as f64 / entries.len() as f64
        },
        zipf_slope: fit_zipf_slope(&counts, SLOPE_MIN_COUNT),
        size_p50: percentile(&sizes, 0.5).unwrap_or(0),
        size_p90: percentile(&sizes, 0.9).unwrap_or(0),
        size_p99: percentile(&sizes, 0.99).unwrap_or(0),
        unique_scopes: scopes.len() as u64,
        runs: runs.len() as u64,
    }
}
