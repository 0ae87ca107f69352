//! `edgecache-trace`: generate skewed workloads, replay them against a real
//! cache over synthetic remote content, simulate them in memory, and place
//! their splits on a hash ring.
//!
//! Exit status is 0 on success, 1 for bad arguments or unreadable inputs, and
//! 2 when a replay served wrong bytes or failed a request.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use edgecache::cache_manager::CacheConfig;
use edgecache::eviction::PolicyKind;
use edgecache::trace::{
    characterize, generate, read_trace_file, replay, schedule_sim, simulate, write_trace, FaultSpec, ReplayOptions,
    ScheduleOptions, ZipfWorkloadSpec,
};
use serde_json::json;

#[derive(Parser)]
#[command(name = "edgecache-trace", version, about = "Workload traces for the edgecache page cache")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a Zipf-distributed trace described by a JSON spec.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: Out,
    },
    /// Serve a trace through an on-disk cache and verify every byte.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        /// Cache configuration JSON. The cache directories are emptied first.
        #[arg(long)]
        config: PathBuf,
        /// JSON list of {at_request_index, target, kind, param}.
        #[arg(long)]
        faults: Option<PathBuf>,
        /// Seeds the synthetic remote content.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[command(flatten)]
        out: Out,
    },
    /// Run the same admission, quota and eviction decisions in memory.
    Simulate {
        #[arg(long)]
        trace: PathBuf,
        /// Cache configuration JSON; without it a single directory of
        /// `--capacity` bytes is assumed.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_policy)]
        policy: Option<PolicyKind>,
        #[arg(long)]
        capacity: Option<u64>,
        #[arg(long)]
        page_size: Option<u64>,
        /// Overrides the eviction seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: Out,
    },
    /// Assign one split per request on a consistent-hash ring.
    ScheduleSim {
        #[arg(long)]
        trace: PathBuf,
        /// Schedule options JSON: node_count, churn, limits.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        nodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: Out,
    },
    /// Popularity and request-size statistics of a trace.
    Report {
        #[arg(long)]
        trace: PathBuf,
        #[command(flatten)]
        out: Out,
    },
}

#[derive(Args)]
struct Out {
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Out {
    fn write(&self, body: &[u8]) -> Result<()> {
        match &self.out {
            Some(p) => fs::write(p, body).with_context(|| format!("writing {}", p.display())),
            None => {
                let mut stdout = io::stdout().lock();
                stdout.write_all(body)?;
                stdout.flush()?;
                Ok(())
            }
        }
    }

    fn json(&self, mut text: String) -> Result<()> {
        text.push('\n');
        self.write(text.as_bytes())
    }
}

fn parse_policy(s: &str) -> Result<PolicyKind, String> {
    serde_json::from_value(json!(s.to_ascii_lowercase())).map_err(|_| format!("unknown policy {s:?}; use lru, fifo or random"))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_config(path: &Path) -> Result<CacheConfig> {
    CacheConfig::from_json(&read(path)?).with_context(|| format!("in {}", path.display()))
}

fn load_trace(path: &Path) -> Result<Vec<edgecache::trace::TraceEntry>> {
    read_trace_file(path).with_context(|| format!("in {}", path.display()))
}

/// `Ok(true)` means the run found a correctness problem.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate { spec, seed, out } => {
            let mut spec = ZipfWorkloadSpec::from_json(&read(&spec)?)?;
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            let entries = generate(&spec)?;
            let mut buf = Vec::new();
            write_trace(&mut buf, &entries)?;
            out.write(&buf)?;
        }
        Command::Replay {
            trace,
            config,
            faults,
            seed,
            workers,
            out,
        } => {
            if workers == 0 {
                bail!("--workers must be at least 1");
            }
            let entries = load_trace(&trace)?;
            let cfg = load_config(&config)?;
            let faults = match faults {
                Some(p) => FaultSpec::list_from_json(&read(&p)?).map_err(|e| anyhow::anyhow!("in {}: {e}", p.display()))?,
                None => Vec::new(),
            };
            let opts = ReplayOptions {
                workers,
                faults,
                seed,
                fresh: true,
            };
            let report = replay(&entries, &cfg, &opts)?;
            out.json(report.to_json())?;
            let s = &report.summary;
            for p in &report.problems {
                eprintln!("{p}");
            }
            return Ok(s.mismatches > 0 || s.failed_requests > 0);
        }
        Command::Simulate {
            trace,
            config,
            policy,
            capacity,
            page_size,
            seed,
            out,
        } => {
            let entries = load_trace(&trace)?;
            let mut cfg = match (config, capacity) {
                (Some(p), None) => load_config(&p)?,
                (None, Some(c)) => CacheConfig::single_dir("unused", c),
                _ => bail!("simulate needs exactly one of --config and --capacity"),
            };
            if let Some(p) = policy {
                cfg.eviction_policy = p;
            }
            if let Some(ps) = page_size {
                cfg.page_size_bytes = ps;
            }
            if let Some(s) = seed {
                cfg.eviction_seed = s;
            }
            cfg.validate()?;
            let report = simulate(&entries, &cfg)?;
            let mut v = serde_json::to_value(&report)?;
            v["sequence"] = json!(report.sequence_string());
            out.json(serde_json::to_string_pretty(&v)?)?;
        }
        Command::ScheduleSim {
            trace,
            config,
            nodes,
            seed,
            out,
        } => {
            let entries = load_trace(&trace)?;
            let mut opts: ScheduleOptions = match config {
                Some(p) => serde_json::from_str(&read(&p)?).with_context(|| format!("in {}", p.display()))?,
                None => ScheduleOptions::default(),
            };
            if let Some(n) = nodes {
                opts.node_count = n;
            }
            if let Some(s) = seed {
                opts.seed = s;
            }
            if opts.node_count == 0 {
                bail!("node count must be at least 1");
            }
            out.json(schedule_sim(&entries, &opts)?.to_json())?;
        }
        Command::Report { trace, out } => {
            let stats = characterize(&load_trace(&trace)?);
            out.json(serde_json::to_string_pretty(&stats)?)?;
        }
    }
    Ok(false)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
