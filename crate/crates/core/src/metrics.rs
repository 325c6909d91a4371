//! The metrics stream: one record per optimization step, line-delimited
//! JSON, append-only.
//!
//! Deterministic fields go to `metrics.jsonl`; the wall clock goes to a
//! `timing.jsonl` sidecar keyed by step, so identical seeded runs produce
//! byte-identical metric streams while step timings remain available to the
//! report command.

use serde::{Deserialize, Serialize};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchCounts {
    pub grpo: usize,
    pub dpo: usize,
    pub skip_allpos: usize,
    pub skip_allfail: usize,
}

impl BranchCounts {
    pub fn total(&self) -> usize {
        self.grpo + self.dpo + self.skip_allpos + self.skip_allfail
    }
}

/// Per-step training record. `wall_clock_s` is serialized to the timing
/// sidecar, not the main stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub branch_counts: BranchCounts,
    pub mean_loss_grpo: Option<f64>,
    pub mean_loss_dpo: Option<f64>,
    /// Count of prompts that regenerated at turn index 1..T-1.
    pub regen_per_turn: Vec<usize>,
    pub simulator_calls: usize,
    pub simulator_failures: usize,
    /// Whether an optimizer update happened (false when every prompt skipped).
    pub updated: bool,
    pub val_solve_rate: Option<f64>,
    #[serde(skip)]
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TimingRecord {
    step: u64,
    wall_clock_s: f64,
}

/// Append-only writer for the step stream plus its timing sidecar.
/// Flushes every `flush_interval` records and on drop.
pub struct MetricsWriter {
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
    flush_interval: usize,
    since_flush: usize,
}

impl MetricsWriter {
    pub fn open(dir: &Path, flush_interval: usize) -> std::io::Result<Self> {
        let open = |p: PathBuf| OpenOptions::new().create(true).append(true).open(p);
        Ok(Self {
            metrics: BufWriter::new(open(dir.join("metrics.jsonl"))?),
            timing: BufWriter::new(open(dir.join("timing.jsonl"))?),
            flush_interval: flush_interval.max(1),
            since_flush: 0,
        })
    }

    pub fn append(&mut self, record: &StepMetrics) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.metrics, record)?;
        self.metrics.write_all(b"\n")?;
        serde_json::to_writer(
            &mut self.timing,
            &TimingRecord {
                step: record.step,
                wall_clock_s: record.wall_clock_s,
            },
        )?;
        self.timing.write_all(b"\n")?;
        self.since_flush += 1;
        if self.since_flush >= self.flush_interval {
            self.flush()?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.metrics.flush()?;
        self.timing.flush()?;
        self.since_flush = 0;
        Ok(())
    }
}

impl Drop for MetricsWriter {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

/// Result of reading a possibly truncated stream: the records that parsed,
/// and whether a malformed tail was dropped.
pub struct StreamRead {
    pub records: Vec<StepMetrics>,
    pub truncated: bool,
}

/// Reads a metrics stream, stopping at the first malformed line. Timing
/// records, when present, are merged back into `wall_clock_s`.
pub fn read_stream(metrics_path: &Path) -> std::io::Result<StreamRead> {
    let mut records = Vec::new();
    let mut truncated = false;
    let reader = BufReader::new(File::open(metrics_path)?);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<StepMetrics>(&line) {
            Ok(r) => records.push(r),
            Err(_) => {
                truncated = true;
                break;
            }
        }
    }
    let timing_path = metrics_path.with_file_name("timing.jsonl");
    if timing_path.exists() {
        let mut by_step = std::collections::HashMap::new();
        for line in BufReader::new(File::open(&timing_path)?).lines() {
            let line = line?;
            if let Ok(t) = serde_json::from_str::<TimingRecord>(&line) {
                by_step.insert(t.step, t.wall_clock_s);
            }
        }
        for r in &mut records {
            if let Some(&w) = by_step.get(&r.step) {
                r.wall_clock_s = w;
            }
        }
    }
    Ok(StreamRead { records, truncated })
}
