//! Derived measurements of a finished run and the files written for it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::error::{Result, SimError};
use crate::planner::{GpuId, LoadItem};
use crate::recovery::measure_recovery_time;
use crate::scenario::Scenario;
use crate::sim::RunResult;
use crate::switcher::ServingMode;
use crate::time::SimTime;
use crate::trace::{ColdPhase, Link, Trace, TraceRecord};

/// Where the first request's time to first token went, in seconds.
/// The components sum to `total`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StartupBreakdown {
    pub total: f64,
    pub load_ckpt_dram: f64,
    pub load_lora_dram: f64,
    pub init_meta: f64,
    pub gpu_load_base: f64,
    pub gpu_load_lora: f64,
    /// Compute, queueing and hops until the first token.
    pub prefill: f64,
    /// Share of `total` spent before compute could start.
    pub loading_fraction: f64,
}

fn overlap(a: SimTime, b: SimTime, lo: SimTime, hi: SimTime) -> f64 {
    let s = a.max(lo);
    let e = b.min(hi);
    e.saturating_sub(s).as_secs_f64()
}

/// Breakdown for the earliest-arriving request that produced a token.
pub fn startup_breakdown(result: &RunResult) -> Option<StartupBreakdown> {
    let req = result
        .requests
        .iter()
        .filter(|r| r.ttft.is_some())
        .min_by_key(|r| (r.arrival_time, r.request_id))?;
    let arrival = req.arrival_time;
    let first_token = arrival + req.ttft?;
    let trace = &result.trace;
    let mut phases = BTreeMap::new();
    let mut loader_start = SimTime::ZERO;
    for r in &trace.records {
        if let TraceRecord::Phase { phase, start, end } = r {
            *phases.entry(*phase).or_insert(0.0) += overlap(*start, *end, arrival, first_token);
            loader_start = loader_start.max(*end);
        }
    }
    let first_compute = trace
        .records
        .iter()
        .filter_map(|r| match r {
            TraceRecord::Compute { start, .. } if *start >= loader_start => Some(*start),
            _ => None,
        })
        .min()
        .unwrap_or(first_token)
        .min(first_token);
    let load_lo = loader_start.max(arrival);
    // The GPU whose last load completed just before compute started.
    let critical: Option<GpuId> = trace
        .records
        .iter()
        .filter_map(|r| match r {
            TraceRecord::Loaded { time, gpu, .. } if *time <= first_compute => Some((*time, *gpu)),
            _ => None,
        })
        .max_by_key(|(t, g)| (*t, std::cmp::Reverse(*g)))
        .map(|(_, g)| g);
    // Without any load (warm start) the wait before compute is not loading.
    let gpu_load = match critical {
        Some(_) => first_compute.saturating_sub(load_lo).as_secs_f64(),
        None => 0.0,
    };
    let mut lora = 0.0;
    if let Some(g) = critical {
        for r in &trace.records {
            match r {
                TraceRecord::Transfer { link: Link::Pcie(x), what, start, end, .. }
                    if *x == g && !what.starts_with("seg") =>
                {
                    lora += overlap(*start, *end, load_lo, first_compute);
                }
                TraceRecord::Convert { gpu, item: LoadItem::AdapterPart(..), start, end, .. } if *gpu == g => {
                    lora += overlap(*start, *end, load_lo, first_compute);
                }
                _ => {}
            }
        }
    }
    let lora = lora.min(gpu_load);
    let total = req.ttft?.as_secs_f64();
    let get = |p: ColdPhase| phases.get(&p).copied().unwrap_or(0.0);
    let (ckpt, lora_ckpt, init) = (get(ColdPhase::LoadCkptDram), get(ColdPhase::LoadLoraCkptDram), get(ColdPhase::InitMeta));
    let prefill = (total - ckpt - lora_ckpt - init - gpu_load).max(0.0);
    Some(StartupBreakdown {
        total,
        load_ckpt_dram: ckpt,
        load_lora_dram: lora_ckpt,
        init_meta: init,
        gpu_load_base: gpu_load - lora,
        gpu_load_lora: lora,
        prefill,
        loading_fraction: if total > 0.0 { (total - prefill) / total } else { 0.0 },
    })
}

/// Summary statistics in seconds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

/// Nearest-rank percentile of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

pub fn stats(values: impl IntoIterator<Item = f64>) -> Stats {
    let mut v: Vec<f64> = values.into_iter().collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let mean = if n == 0 { 0.0 } else { v.iter().sum::<f64>() / n as f64 };
    let variance = if n == 0 {
        0.0
    } else {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64
    };
    Stats {
        count: n,
        mean,
        variance,
        p50: percentile(&v, 0.5),
        p90: percentile(&v, 0.9),
        p99: percentile(&v, 0.99),
        max: v.last().copied().unwrap_or(0.0),
    }
}

pub fn ttft_stats(result: &RunResult) -> Stats {
    stats(result.requests.iter().filter_map(|r| r.ttft).map(SimTime::as_secs_f64))
}

/// End-to-end latency of completed requests.
pub fn latency_stats(result: &RunResult) -> Stats {
    stats(result.requests.iter().filter_map(|r| r.latency()).map(SimTime::as_secs_f64))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThroughputBucket {
    pub start: f64,
    pub tokens: u64,
    pub tokens_per_sec: f64,
}

/// Tokens emitted per fixed-width time bucket, up to the last token.
pub fn throughput_timeline(trace: &Trace, bucket: f64) -> Vec<ThroughputBucket> {
    let width = SimTime::from_secs_round(bucket).as_nanos().max(1);
    let mut counts: Vec<u64> = Vec::new();
    for (t, _, _) in trace.tokens() {
        let i = (t.as_nanos() / width) as usize;
        if counts.len() <= i {
            counts.resize(i + 1, 0);
        }
        counts[i] += 1;
    }
    let secs = width as f64 / 1e9;
    counts
        .into_iter()
        .enumerate()
        .map(|(i, tokens)| ThroughputBucket {
            start: i as f64 * secs,
            tokens,
            tokens_per_sec: tokens as f64 / secs,
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub scenario_hash: String,
    pub seed: u64,
    pub trace_hash: String,
    pub requests: usize,
    pub completed: usize,
    pub rejected: usize,
    pub tokens: usize,
    pub ttft: Stats,
    pub latency: Stats,
    pub first_ready: Option<f64>,
    pub switch_time: Option<f64>,
    pub recovery_time: Option<f64>,
    pub end_time: f64,
    pub config: serde_json::Value,
}

pub fn summarize(result: &RunResult, scenario: &Scenario) -> Summary {
    let trace = &result.trace;
    let rejected = trace
        .records
        .iter()
        .filter(|r| matches!(r, TraceRecord::Rejected { .. }))
        .count();
    let recovery_time = trace
        .first_crash()
        .and_then(|_| measure_recovery_time(trace, scenario.recovery.metric).ok())
        .map(SimTime::as_secs_f64);
    Summary {
        scenario_hash: result.scenario_hash.clone(),
        seed: result.seed,
        trace_hash: trace.hash(),
        requests: result.requests.len(),
        completed: result.requests.iter().filter(|r| r.is_finished()).count(),
        rejected,
        tokens: trace.tokens().count(),
        ttft: ttft_stats(result),
        latency: latency_stats(result),
        first_ready: trace.chain_ready_times().first().map(|t| t.as_secs_f64()),
        switch_time: result.switch_time.map(SimTime::as_secs_f64),
        recovery_time,
        end_time: result.end_time.as_secs_f64(),
        config: serde_json::to_value(scenario).unwrap_or(serde_json::Value::Null),
    }
}

fn io(path: &Path, e: impl std::fmt::Display) -> SimError {
    SimError::Io(format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| io(path, e))
}

/// Writes requests.csv, throughput.csv, breakdown.json and summary.json.
pub fn write_outputs(dir: &Path, result: &RunResult, scenario: &Scenario) -> Result<Summary> {
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;

    let path = dir.join("requests.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| io(&path, e))?;
    w.write_record(["request_id", "arrival", "ttft", "completion", "adapter", "mode"])
        .map_err(|e| io(&path, e))?;
    for (r, mode) in result.requests.iter().zip(&result.modes) {
        let opt = |t: Option<SimTime>| t.map(|t| format!("{:.9}", t.as_secs_f64())).unwrap_or_default();
        let mode = match mode {
            Some(ServingMode::PipelineParallel) => "pipeline",
            Some(ServingMode::SingleGpu) => "single",
            None => "",
        };
        w.write_record([
            r.request_id.to_string(),
            format!("{:.9}", r.arrival_time.as_secs_f64()),
            opt(r.ttft),
            opt(r.completion_time),
            r.adapter_id.as_ref().map(ToString::to_string).unwrap_or_default(),
            mode.to_string(),
        ])
        .map_err(|e| io(&path, e))?;
    }
    w.flush().map_err(|e| io(&path, e))?;

    let path = dir.join("throughput.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| io(&path, e))?;
    w.write_record(["bin_start", "tokens", "tokens_per_s"]).map_err(|e| io(&path, e))?;
    for b in throughput_timeline(&result.trace, 1.0) {
        w.write_record([format!("{:.3}", b.start), b.tokens.to_string(), format!("{:.3}", b.tokens_per_sec)])
            .map_err(|e| io(&path, e))?;
    }
    w.flush().map_err(|e| io(&path, e))?;

    write_json(&dir.join("breakdown.json"), &startup_breakdown(result))?;
    let summary = summarize(result, scenario);
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.5), 2.0);
        assert_eq!(percentile(&v, 0.99), 4.0);
        assert_eq!(percentile(&[], 0.5), 0.0);
    }

    #[test]
    fn population_variance() {
        let s = stats([2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(s.mean, 5.0);
        assert_eq!(s.variance, 4.0);
        assert_eq!(s.max, 9.0);
    }

    #[test]
    fn timeline_buckets() {
        let mut t = Trace::default();
        for (ms, i) in [(100, 0), (900, 1), (1500, 2)] {
            t.push(TraceRecord::Token {
                time: SimTime(ms * 1_000_000),
                request: 0,
                index: i,
            });
        }
        let b = throughput_timeline(&t, 1.0);
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].tokens, 2);
        assert_eq!(b[1].tokens_per_sec, 1.0);
    }
}
