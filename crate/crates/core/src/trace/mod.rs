//! Workload traces: generation, replay against a real cache, in-memory
//! simulation, split-placement simulation and trace statistics.
//!
//! A trace is plain text, one request per line:
//! `timestamp_ms,file_id,offset,length,scope,run_id`. Blank lines and lines
//! starting with `#` are ignored. `scope` and `run_id` may be empty.

mod replay;
mod schedule;
mod simulate;
mod stats;
mod synthetic;
mod workload;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, BufRead, Write};
use std::path::Path;

use thiserror::Error;

use crate::scope::Scope;

pub use replay::{replay, CorruptMode, FaultKind, FaultParam, FaultSpec, ReplayOptions, ReplayReport, ReplaySummary};
pub use schedule::{schedule_sim, ChurnEvent, ChurnKind, RemapEvent, ScheduleOptions, ScheduleReport};
pub use simulate::{outcome_code, simulate, simulate_with, SimReport};
pub use stats::{characterize, fit_zipf_slope, percentile, TraceStats};
pub use synthetic::{file_sizes, SyntheticStore};
pub use workload::{generate, ReadSizeMix, ScopeLayout, WorkloadError, ZipfWorkloadSpec};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub timestamp_ms: u64,
    pub file_id: String,
    pub offset: u64,
    pub length: u64,
    pub scope: Scope,
    pub run_id: String,
}

impl fmt::Display for TraceEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{}",
            self.timestamp_ms, self.file_id, self.offset, self.length, self.scope, self.run_id
        )
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl TraceEntry {
    pub fn parse_line(line: &str, line_no: usize) -> Result<Self, TraceError> {
        let err = |reason: String| TraceError::Parse { line: line_no, reason };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", fields.len())));
        }
        let num = |i: usize, name: &str| {
            fields[i]
                .trim()
                .parse::<u64>()
                .map_err(|e| err(format!("bad {name} {:?}: {e}", fields[i])))
        };
        let file_id = fields[1].trim();
        if file_id.is_empty() {
            return Err(err("empty file id".into()));
        }
        let length = num(3, "length")?;
        if length == 0 {
            return Err(err("length must be at least 1".into()));
        }
        Ok(TraceEntry {
            timestamp_ms: num(0, "timestamp")?,
            file_id: file_id.to_string(),
            offset: num(2, "offset")?,
            length,
            scope: fields[4]
                .trim()
                .parse()
                .map_err(|e| err(format!("bad scope {:?}: {e}", fields[4])))?,
            run_id: fields[5].trim().to_string(),
        })
    }

    pub fn run(&self) -> Option<&str> {
        (!self.run_id.is_empty()).then_some(self.run_id.as_str())
    }
}

/// Parses a whole trace; timestamps must not decrease.
pub fn read_trace(reader: impl BufRead) -> Result<Vec<TraceEntry>, TraceError> {
    let mut out: Vec<TraceEntry> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let e = TraceEntry::parse_line(t, i + 1)?;
        if let Some(prev) = out.last() {
            if e.timestamp_ms < prev.timestamp_ms {
                return Err(TraceError::Parse {
                    line: i + 1,
                    reason: format!("timestamp {} goes backwards from {}", e.timestamp_ms, prev.timestamp_ms),
                });
            }
        }
        out.push(e);
    }
    Ok(out)
}

pub fn read_trace_file(path: &Path) -> Result<Vec<TraceEntry>, TraceError> {
    read_trace(io::BufReader::new(std::fs::File::open(path)?))
}

pub fn write_trace(mut writer: impl Write, entries: &[TraceEntry]) -> io::Result<()> {
    for e in entries {
        writeln!(writer, "{e}")?;
    }
    writer.flush()
}

pub fn write_trace_file(path: &Path, entries: &[TraceEntry]) -> io::Result<()> {
    write_trace(io::BufWriter::new(std::fs::File::create(path)?), entries)
}

/// Requests per object, most popular first.
pub fn rank_frequencies(entries: &[TraceEntry]) -> Vec<(String, u64)> {
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for e in entries {
        *counts.entry(&e.file_id).or_default() += 1;
    }
    let mut v: Vec<(String, u64)> = counts.into_iter().map(|(k, c)| (k.to_string(), c)).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}
