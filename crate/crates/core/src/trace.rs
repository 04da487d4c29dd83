//! Simulation trace records, the trace hash, and the link-capacity audit.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::AdapterId;
use crate::chain::PipelineChain;
use crate::cluster::ClusterSpec;
use crate::engine::{BatchId, BatchPhase, RequestId};
use crate::error::{Result, SimError};
use crate::planner::{GpuId, LoadItem};
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Link {
    Ssd,
    /// Host-to-GPU link of one GPU.
    Pcie(GpuId),
    Interconnect(GpuId, GpuId),
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Link::Ssd => f.write_str("ssd"),
            Link::Pcie(g) => write!(f, "pcie{g}"),
            Link::Interconnect(a, b) => write!(f, "ic{a}-{b}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColdPhase {
    LoadCkptDram,
    LoadLoraCkptDram,
    InitMeta,
}

impl fmt::Display for ColdPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColdPhase::LoadCkptDram => "load_ckpt_dram",
            ColdPhase::LoadLoraCkptDram => "load_lora_ckpt_dram",
            ColdPhase::InitMeta => "init_meta",
        })
    }
}

fn adapter_label(a: &Option<AdapterId>) -> &str {
    a.as_ref().map_or("-", |a| a.as_str())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TraceRecord {
    Phase {
        phase: ColdPhase,
        start: SimTime,
        end: SimTime,
    },
    Transfer {
        link: Link,
        what: String,
        bytes: u64,
        start: SimTime,
        end: SimTime,
        cancelled: bool,
    },
    Convert {
        gpu: GpuId,
        item: LoadItem,
        start: SimTime,
        end: SimTime,
        cancelled: bool,
    },
    Loaded {
        time: SimTime,
        gpu: GpuId,
        item: LoadItem,
    },
    ChainReady {
        time: SimTime,
        chain: PipelineChain,
    },
    Arrival {
        time: SimTime,
        request: RequestId,
        adapter: Option<AdapterId>,
    },
    Rejected {
        time: SimTime,
        request: RequestId,
        reason: String,
    },
    Compute {
        gpu: GpuId,
        batch: BatchId,
        phase: BatchPhase,
        requests: u32,
        start: SimTime,
        end: SimTime,
    },
    Token {
        time: SimTime,
        request: RequestId,
        index: u32,
    },
    Done {
        time: SimTime,
        request: RequestId,
    },
    Merge {
        gpu: GpuId,
        from: Option<AdapterId>,
        to: Option<AdapterId>,
        start: SimTime,
        end: SimTime,
    },
    AdapterSwitch {
        time: SimTime,
        lane: String,
        to: Option<AdapterId>,
    },
    Crash {
        time: SimTime,
        gpu: GpuId,
    },
    Recovery {
        time: SimTime,
        detail: String,
    },
    StrategySwitch {
        time: SimTime,
    },
    Discard {
        time: SimTime,
        gpu: GpuId,
        parts: u32,
    },
}

impl TraceRecord {
    /// Time the record refers to; interval records report their end.
    pub fn time(&self) -> SimTime {
        use TraceRecord::*;
        match self {
            Phase { end, .. }
            | Transfer { end, .. }
            | Convert { end, .. }
            | Compute { end, .. }
            | Merge { end, .. } => *end,
            Loaded { time, .. }
            | ChainReady { time, .. }
            | Arrival { time, .. }
            | Rejected { time, .. }
            | Token { time, .. }
            | Done { time, .. }
            | AdapterSwitch { time, .. }
            | Crash { time, .. }
            | Recovery { time, .. }
            | StrategySwitch { time }
            | Discard { time, .. } => *time,
        }
    }
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use TraceRecord::*;
        match self {
            Phase { phase, start, end } => write!(f, "{start}..{end} phase {phase}"),
            Transfer { link, what, bytes, start, end, cancelled } => write!(
                f,
                "{start}..{end} transfer {link} {what} bytes={bytes}{}",
                if *cancelled { " cancelled" } else { "" }
            ),
            Convert { gpu, item, start, end, cancelled } => write!(
                f,
                "{start}..{end} convert gpu{gpu} {item}{}",
                if *cancelled { " cancelled" } else { "" }
            ),
            Loaded { time, gpu, item } => write!(f, "{time} loaded gpu{gpu} {item}"),
            ChainReady { time, chain } => write!(f, "{time} chain_ready {chain}"),
            Arrival { time, request, adapter } => {
                write!(f, "{time} arrival r{request} adapter={}", adapter_label(adapter))
            }
            Rejected { time, request, reason } => write!(f, "{time} rejected r{request} {reason}"),
            Compute { gpu, batch, phase, requests, start, end } => write!(
                f,
                "{start}..{end} compute gpu{gpu} b{batch} {phase} n={requests}"
            ),
            Token { time, request, index } => write!(f, "{time} token r{request} #{index}"),
            Done { time, request } => write!(f, "{time} done r{request}"),
            Merge { gpu, from, to, start, end } => write!(
                f,
                "{start}..{end} merge gpu{gpu} {}->{}",
                adapter_label(from),
                adapter_label(to)
            ),
            AdapterSwitch { time, lane, to } => {
                write!(f, "{time} adapter_switch {lane} to={}", adapter_label(to))
            }
            Crash { time, gpu } => write!(f, "{time} crash gpu{gpu}"),
            Recovery { time, detail } => write!(f, "{time} recovery {detail}"),
            StrategySwitch { time } => write!(f, "{time} strategy_switch single_gpu"),
            Discard { time, gpu, parts } => write!(f, "{time} discard gpu{gpu} parts={parts}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    /// Describes the run, typically the scenario hash and seed.
    pub header: String,
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn push(&mut self, record: TraceRecord) {
        self.records.push(record);
    }

    pub fn render(&self) -> String {
        let mut out = String::with_capacity(self.records.len() * 48);
        out.push_str(&self.header);
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.to_string());
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the rendered trace, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.header.as_bytes());
        h.update(b"\n");
        for r in &self.records {
            h.update(r.to_string().as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn first_crash(&self) -> Option<SimTime> {
        self.records.iter().find_map(|r| match r {
            TraceRecord::Crash { time, .. } => Some(*time),
            _ => None,
        })
    }

    pub fn chain_ready_times(&self) -> Vec<SimTime> {
        self.records
            .iter()
            .filter_map(|r| match r {
                TraceRecord::ChainReady { time, .. } => Some(*time),
                _ => None,
            })
            .collect()
    }

    pub fn tokens(&self) -> impl Iterator<Item = (SimTime, RequestId, u32)> + '_ {
        self.records.iter().filter_map(|r| match r {
            TraceRecord::Token { time, request, index } => Some((*time, *request, *index)),
            _ => None,
        })
    }
}

/// Usage totals for one link.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinkUsage {
    pub transfers: usize,
    pub bytes: u64,
    pub busy: SimTime,
}

/// Checks that transfers on each link never overlap and never exceed the
/// link's bandwidth. Returns per-link totals.
pub fn audit_links(trace: &Trace, cluster: &ClusterSpec) -> Result<BTreeMap<Link, LinkUsage>> {
    let mut per_link: BTreeMap<Link, Vec<(SimTime, SimTime, u64, usize)>> = BTreeMap::new();
    for (i, r) in trace.records.iter().enumerate() {
        if let TraceRecord::Transfer { link, bytes, start, end, .. } = r {
            if end < start {
                return Err(SimError::Invariant {
                    event_index: i as u64,
                    message: format!("transfer on {link} ends before it starts"),
                });
            }
            per_link.entry(*link).or_default().push((*start, *end, *bytes, i));
        }
    }
    let mut usage = BTreeMap::new();
    for (link, mut xs) in per_link {
        let bandwidth = match link {
            Link::Ssd => cluster.ssd_bandwidth,
            Link::Pcie(_) => cluster.effective_pcie_bandwidth(),
            Link::Interconnect(..) => cluster.interconnect_bandwidth,
        };
        xs.sort();
        let mut total = LinkUsage::default();
        let mut last_end = SimTime::ZERO;
        for &(start, end, bytes, i) in &xs {
            if start < last_end {
                return Err(SimError::Invariant {
                    event_index: i as u64,
                    message: format!("overlapping transfers on {link} at {start}"),
                });
            }
            let capacity = bandwidth * (end - start).as_secs_f64();
            // One byte of slack absorbs float rounding in the capacity product.
            if bytes as f64 > capacity + 1.0 {
                return Err(SimError::Invariant {
                    event_index: i as u64,
                    message: format!(
                        "{bytes} bytes on {link} in {} ns exceeds capacity {capacity:.0}",
                        (end - start).as_nanos()
                    ),
                });
            }
            last_end = end;
            total.transfers += 1;
            total.bytes += bytes;
            total.busy += end - start;
        }
        usage.insert(link, total);
    }
    Ok(usage)
}
