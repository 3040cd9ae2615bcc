//! Per-round JSONL trace records and replay verification.

use crate::harness::{HarnessError, RunReport};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

/// One line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    #[serde(rename = "E")]
    pub exit_layer: usize,
    pub planned_len: usize,
    pub g: usize,
    pub accepted: usize,
    pub emitted_len: usize,
    pub layers_loaded: u64,
    pub tau: f64,
    /// Acceptance estimates the plan was built from, when the policy keeps any.
    pub alpha_snapshot: Option<Vec<f64>>,
    pub u_r: usize,
}

pub fn write_trace(path: &Path, records: &[RoundRecord]) -> Result<(), HarnessError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<RoundRecord>, HarnessError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Totals recomputed from a trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recomputed {
    pub tokens_emitted: u64,
    pub layers_loaded: u64,
    pub etpl: f64,
}

/// Sums a trace and checks every record's cost against `g·E + L`.
pub fn recompute(records: &[RoundRecord], num_layers: usize) -> Result<Recomputed, HarnessError> {
    let mut tokens = 0u64;
    let mut layers = 0u64;
    for r in records {
        let expected = (r.g * r.exit_layer + num_layers) as u64;
        if r.layers_loaded != expected {
            return Err(HarnessError::Invariant(format!(
                "round {}: layers_loaded {} != g·E + L = {}",
                r.round, r.layers_loaded, expected
            )));
        }
        if r.accepted > r.g {
            return Err(HarnessError::Invariant(format!("round {}: accepted > g", r.round)));
        }
        tokens += r.emitted_len as u64;
        layers += r.layers_loaded;
    }
    if layers == 0 {
        return Err(HarnessError::Invariant("trace has no layer loads".into()));
    }
    Ok(Recomputed { tokens_emitted: tokens, layers_loaded: layers, etpl: tokens as f64 / layers as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayRow {
    pub policy: String,
    pub prompt: usize,
    pub trace: PathBuf,
    pub recomputed: Recomputed,
}

/// Re-reads every trace listed in `dir/summary.csv` and cross-checks the
/// recomputed ledger against the summary row. Any difference is an
/// invariant violation.
pub fn replay_dir(dir: &Path) -> Result<Vec<ReplayRow>, HarnessError> {
    let mut rdr = csv::Reader::from_path(dir.join("summary.csv"))?;
    let mut rows = Vec::new();
    for row in rdr.deserialize() {
        let report: RunReport = row?;
        let trace = dir.join(&report.trace);
        let recomputed = recompute(&read_trace(&trace)?, report.num_layers)?;
        if recomputed.tokens_emitted != report.tokens_emitted
            || recomputed.layers_loaded != report.layers_loaded
            || recomputed.etpl != report.etpl
        {
            return Err(HarnessError::Invariant(format!(
                "{}: trace gives {}/{} = {}, summary says {}/{} = {}",
                report.trace,
                recomputed.tokens_emitted,
                recomputed.layers_loaded,
                recomputed.etpl,
                report.tokens_emitted,
                report.layers_loaded,
                report.etpl
            )));
        }
        if report.sim_speedup != report.etpl * report.num_layers as f64 {
            return Err(HarnessError::Invariant(format!("{}: sim_speedup != etpl × L", report.trace)));
        }
        rows.push(ReplayRow { policy: report.policy, prompt: report.prompt, trace, recomputed });
    }
    Ok(rows)
}
