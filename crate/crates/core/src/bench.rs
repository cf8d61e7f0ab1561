//! Synthetic throughput workload.

use std::time::Instant;

use serde::Serialize;

use crate::trace::{replay, synthetic_trace, MetricsRow, SyntheticConfig, TraceError};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchConfig {
    pub ops: usize,
    /// Revisions between flattens; 0 disables flattening.
    pub flatten_every: u64,
    pub ops_per_revision: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { ops: 100_000, flatten_every: 1000, ops_per_revision: 10, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub ops: usize,
    pub elapsed_secs: f64,
    pub ops_per_sec: f64,
    /// Slowest single edit, in nanoseconds. Flattens are not edits.
    pub max_op_latency_ns: u64,
    pub max_flatten_ns: u64,
    pub flattens: usize,
    pub final_epoch: u64,
}

pub fn run(cfg: &BenchConfig) -> Result<BenchReport, TraceError> {
    let events = synthetic_trace(&SyntheticConfig {
        seed: cfg.seed,
        ops: cfg.ops,
        ops_per_revision: cfg.ops_per_revision,
        ..SyntheticConfig::default()
    });
    let start = Instant::now();
    let rows = replay(&events, cfg.flatten_every, 1)?;
    let elapsed = start.elapsed().as_secs_f64();
    Ok(summarize(cfg.ops, elapsed, &rows))
}

fn summarize(ops: usize, elapsed: f64, rows: &[MetricsRow]) -> BenchReport {
    let mut max_op = 0;
    let mut max_flatten = 0;
    let mut flattens = 0;
    let mut epoch = 0;
    for row in rows {
        if row.epoch > epoch {
            epoch = row.epoch;
            flattens += 1;
            max_flatten = max_flatten.max(row.op_duration);
        } else {
            max_op = max_op.max(row.op_duration);
        }
    }
    BenchReport {
        ops,
        elapsed_secs: elapsed,
        ops_per_sec: if elapsed > 0.0 { ops as f64 / elapsed } else { f64::INFINITY },
        max_op_latency_ns: max_op,
        max_flatten_ns: max_flatten,
        flattens,
        final_epoch: epoch,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_bench() {
        let r = run(&BenchConfig { ops: 5000, flatten_every: 100, ..BenchConfig::default() }).unwrap();
        assert_eq!(r.ops, 5000);
        assert_eq!(r.flattens, 4);
        assert!(r.ops_per_sec > 0.0);
        let r = run(&BenchConfig { ops: 2000, flatten_every: 0, ..BenchConfig::default() }).unwrap();
        assert_eq!(r.flattens, 0);
    }
}
