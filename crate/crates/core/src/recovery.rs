//! Crash handling: layer reassignment while loading, pipeline chain
//! discovery, KV-cache reconstruction, and the full-restart baseline.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::catalog::{Segment, SegmentId};
use crate::chain::{PipelineChain, Stage};
use crate::cluster::{prefill_time, ComputeCoefficients};
use crate::engine::{KvLedger, Request};
use crate::error::{Result, SimError};
use crate::planner::{GpuId, GpuState};
use crate::time::SimTime;
use crate::trace::{Trace, TraceRecord};

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrashPhase {
    Loading,
    Inference,
    #[default]
    Any,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrashEvent {
    pub time: SimTime,
    pub gpu_id: GpuId,
    pub phase_hint: CrashPhase,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryMode {
    /// Layer reassignment plus KV reconstruction.
    #[default]
    Pp,
    /// Drop everything and restart loading and inference.
    Full,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReassignmentPlan {
    /// Survivor → contiguous block of segment ids.
    pub target_blocks: BTreeMap<GpuId, Range<SegmentId>>,
    /// Survivor → full loading order, block first.
    pub new_orders: BTreeMap<GpuId, Vec<SegmentId>>,
}

/// Splits `n` segments into `m` contiguous blocks, larger blocks first.
pub fn balanced_blocks(n: u32, m: u32) -> Vec<Range<SegmentId>> {
    let base = n / m;
    let extra = n % m;
    let mut start = 0;
    (0..m)
        .map(|i| {
            let len = base + u32::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

fn overlap(state: &GpuState, block: &Range<SegmentId>) -> usize {
    block.clone().filter(|s| state.loaded_segments.contains(s)).count()
}

/// Block index per survivor maximising loaded overlap. Permutations are tried
/// in lexicographic order so the first optimum gives lower GPUs lower blocks.
fn best_assignment(survivors: &[&GpuState], blocks: &[Range<SegmentId>]) -> Vec<usize> {
    let m = survivors.len();
    let score: Vec<Vec<usize>> = survivors
        .iter()
        .map(|s| blocks.iter().map(|b| overlap(s, b)).collect())
        .collect();
    if m > 8 {
        let mut assign = vec![usize::MAX; m];
        for (b, _) in blocks.iter().enumerate() {
            let pick = (0..m)
                .filter(|&i| assign[i] == usize::MAX)
                .max_by_key(|&i| (score[i][b], std::cmp::Reverse(i)))
                .unwrap();
            assign[pick] = b;
        }
        return assign;
    }

    fn search(
        i: usize,
        score: &[Vec<usize>],
        used: &mut Vec<bool>,
        cur: &mut Vec<usize>,
        acc: usize,
        best: &mut (usize, Vec<usize>),
    ) {
        if i == score.len() {
            if best.1.is_empty() || acc > best.0 {
                *best = (acc, cur.clone());
            }
            return;
        }
        for b in 0..used.len() {
            if !used[b] {
                used[b] = true;
                cur.push(b);
                search(i + 1, score, used, cur, acc + score[i][b], best);
                cur.pop();
                used[b] = false;
            }
        }
    }

    let mut best = (0, Vec::new());
    search(0, &score, &mut vec![false; m], &mut Vec::new(), 0, &mut best);
    best.1
}

/// Loading order for a survivor that must serve `block`: the block ascending,
/// then the rest of the model starting after the block, wrapping around.
pub fn order_for_block(block: &Range<SegmentId>, segment_count: u32) -> Vec<SegmentId> {
    let mut order: Vec<SegmentId> = block.clone().collect();
    order.extend(
        (0..segment_count)
            .map(|i| (block.end + i) % segment_count)
            .filter(|s| !block.contains(s)),
    );
    order
}

/// Rebalances the model over the surviving GPUs.
pub fn reassign_layers(survivors: &[GpuState], segment_count: u32) -> Result<ReassignmentPlan> {
    let mut alive: Vec<&GpuState> = survivors.iter().filter(|s| s.alive).collect();
    if alive.is_empty() {
        return Err(SimError::Unrecoverable("no surviving GPU".into()));
    }
    alive.sort_by_key(|s| s.gpu_id);
    let m = (alive.len() as u32).min(segment_count);
    let blocks = balanced_blocks(segment_count, m);
    // With more survivors than segments, the extra GPUs get no block.
    let assigned = &alive[..m as usize];
    let assign = best_assignment(assigned, &blocks);
    let mut plan = ReassignmentPlan {
        target_blocks: BTreeMap::new(),
        new_orders: BTreeMap::new(),
    };
    for (state, &b) in assigned.iter().zip(&assign) {
        let block = blocks[b].clone();
        plan.new_orders
            .insert(state.gpu_id, order_for_block(&block, segment_count));
        plan.target_blocks.insert(state.gpu_id, block);
    }
    for state in &alive[m as usize..] {
        plan.new_orders
            .insert(state.gpu_id, (0..segment_count).collect());
    }
    Ok(plan)
}

/// Plan for a restart from scratch over the survivors.
pub fn full_recovery_baseline(survivors: &[GpuId], segment_count: u32) -> Result<ReassignmentPlan> {
    let wiped: Vec<GpuState> = survivors.iter().map(|&g| GpuState::new(g)).collect();
    reassign_layers(&wiped, segment_count)
}

/// Greedy chain over loaded segments: from the current layer, take the alive
/// GPU with the longest loaded run (lowest id on ties) and continue after it.
pub fn find_pipeline_chain(states: &[GpuState], segments: &[Segment]) -> Option<PipelineChain> {
    let mut alive: Vec<&GpuState> = states.iter().filter(|s| s.alive).collect();
    alive.sort_by_key(|s| s.gpu_id);
    let n = segments.len();
    let mut cursor = 0;
    let mut stages = Vec::new();
    while cursor < n {
        let run = |s: &GpuState| {
            (cursor..n)
                .take_while(|&i| s.loaded_segments.contains(&segments[i].segment_id))
                .count()
        };
        let (gpu, len) = alive
            .iter()
            .map(|s| (s.gpu_id, run(s)))
            .fold((0, 0), |best, cand| if cand.1 > best.1 { cand } else { best });
        if len == 0 {
            return None;
        }
        stages.push(Stage {
            gpu,
            layers: segments[cursor].layer_range.start..segments[cursor + len - 1].layer_range.end,
        });
        cursor += len;
    }
    Some(PipelineChain { stages })
}

/// Reconstruction cost of one request on one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRebuild {
    pub gpu: GpuId,
    pub layers: Range<u32>,
    /// Layers whose KV survived on this GPU: only Q is recomputed.
    pub q_layers: u32,
    /// Layers recomputed in full; new ledger entries are written for them.
    pub full_layers: u32,
    pub seconds: f64,
}

/// Per-stage cost of rebuilding a request's KV cache over `chain`.
///
/// The prompt and the tokens generated so far are treated as one input
/// sequence. Cached layers only recompute Q; the rest run a full prefill.
pub fn reconstruct_kv(
    request: &Request,
    chain: &PipelineChain,
    ledger: &KvLedger,
    coeffs: &ComputeCoefficients,
) -> Result<Vec<StageRebuild>> {
    let tokens = request.merged_length();
    chain
        .stages
        .iter()
        .map(|s| {
            let full = ledger.missing(request.request_id, s.layers.clone(), s.gpu);
            let q = s.layer_count() - full;
            let mut seconds = 0.0;
            if q > 0 {
                seconds += prefill_time(q, tokens, 1, coeffs)? * coeffs.q_recompute_factor;
            }
            if full > 0 {
                seconds += prefill_time(full, tokens, 1, coeffs)?;
            }
            Ok(StageRebuild {
                gpu: s.gpu,
                layers: s.layers.clone(),
                q_layers: q,
                full_layers: full,
                seconds,
            })
        })
        .collect()
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryMetric {
    /// First token emitted after the crash.
    #[default]
    NextToken,
    /// First complete pipeline chain after the crash.
    ChainViable,
}

/// Time from the first crash until service resumes.
///
/// Falls back to the next chain and then the next loaded item when the chosen
/// marker never appears.
pub fn measure_recovery_time(trace: &Trace, metric: RecoveryMetric) -> Result<SimTime> {
    let crash = trace
        .first_crash()
        .ok_or_else(|| SimError::Query("trace contains no crash".into()))?;
    let after = |pred: &dyn Fn(&TraceRecord) -> bool| {
        trace
            .records
            .iter()
            .filter(|r| r.time() >= crash && pred(r))
            .map(TraceRecord::time)
            .min()
    };
    let token = || after(&|r| matches!(r, TraceRecord::Token { .. }));
    let chain = || after(&|r| matches!(r, TraceRecord::ChainReady { .. }));
    let loaded = || after(&|r| matches!(r, TraceRecord::Loaded { .. }));
    let resumed = match metric {
        RecoveryMetric::NextToken => token().or_else(chain).or_else(loaded),
        RecoveryMetric::ChainViable => chain().or_else(loaded),
    };
    resumed
        .map(|t| t - crash)
        .ok_or_else(|| SimError::Query("service never resumed after the crash".into()))
}

/// Covering check used as an oracle: does the union of alive GPUs' segments
/// cover the model?
pub fn union_covers(states: &[GpuState], segment_count: u32) -> bool {
    let all: BTreeSet<SegmentId> = states
        .iter()
        .filter(|s| s.alive)
        .flat_map(|s| s.loaded_segments.iter().copied())
        .collect();
    (0..segment_count).all(|s| all.contains(&s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{partition_model, CheckpointLocation, ModelSpec};

    fn state(gpu: GpuId, loaded: &[SegmentId]) -> GpuState {
        let mut s = GpuState::new(gpu);
        s.loaded_segments.extend(loaded.iter().copied());
        s
    }

    fn segs(layers: u32, parts: u32) -> Vec<Segment> {
        let m = ModelSpec {
            model_id: "m".into(),
            layer_count: layers,
            bytes_per_layer: 1,
            extra_bytes: 0,
            checkpoint_location: CheckpointLocation::Dram,
        };
        partition_model(&m, parts).unwrap()
    }

    #[test]
    fn two_of_four_crash_during_loading() {
        let plan = reassign_layers(&[state(0, &[0]), state(3, &[3])], 4).unwrap();
        assert_eq!(plan.target_blocks[&0], 0..2);
        assert_eq!(plan.target_blocks[&3], 2..4);
        assert_eq!(plan.new_orders[&0], vec![0, 1, 2, 3]);
        assert_eq!(plan.new_orders[&3], vec![2, 3, 0, 1]);
    }

    #[test]
    fn single_survivor_takes_everything() {
        let plan = reassign_layers(&[state(2, &[2])], 4).unwrap();
        assert_eq!(plan.target_blocks[&2], 0..4);
        assert_eq!(plan.new_orders[&2], vec![0, 1, 2, 3]);
    }

    #[test]
    fn no_survivor_is_unrecoverable() {
        let mut dead = state(0, &[]);
        dead.alive = false;
        assert!(matches!(
            reassign_layers(&[dead], 4),
            Err(SimError::Unrecoverable(_))
        ));
    }

    #[test]
    fn three_survivors_prefer_overlap() {
        // Blocks of 4 over 3 survivors: [0..2), [2..3), [3..4).
        let plan =
            reassign_layers(&[state(0, &[3]), state(1, &[0]), state(2, &[2])], 4).unwrap();
        assert_eq!(plan.target_blocks[&0], 3..4);
        assert_eq!(plan.target_blocks[&1], 0..2);
        assert_eq!(plan.target_blocks[&2], 2..3);
    }

    #[test]
    fn chain_examples() {
        let s = segs(32, 4);
        let chain = find_pipeline_chain(&[state(0, &[0, 1]), state(1, &[2, 3])], &s).unwrap();
        assert_eq!(chain.to_string(), "gpu0[0..16) gpu1[16..32)");
        let chain = find_pipeline_chain(&[state(0, &[0, 2]), state(1, &[1, 3])], &s).unwrap();
        assert_eq!(chain.stages.len(), 4);
        assert_eq!(chain.gpus().collect::<Vec<_>>(), vec![0, 1, 0, 1]);
        assert!(find_pipeline_chain(&[state(0, &[0, 2, 3]), state(1, &[0, 3])], &s).is_none());
    }

    #[test]
    fn chain_skips_dead_gpus() {
        let s = segs(32, 2);
        let mut dead = state(0, &[0, 1]);
        dead.alive = false;
        assert!(find_pipeline_chain(&[dead, state(1, &[1])], &s).is_none());
    }

    fn request(prompt: u32, generated: u32) -> Request {
        let mut r = Request::new(1, SimTime::ZERO, prompt, 10, None);
        r.generated = generated;
        r
    }

    fn coeffs() -> ComputeCoefficients {
        ComputeCoefficients {
            prefill_per_layer_token: 1e-6,
            q_recompute_factor: 1.0 / 3.0,
            ..ComputeCoefficients::default()
        }
    }

    #[test]
    fn rebuild_after_losing_the_second_half() {
        let r = request(10, 5);
        let mut kv = KvLedger::new(32);
        kv.write(1, 0..16, 0);
        let chain = PipelineChain {
            stages: vec![Stage { gpu: 0, layers: 0..16 }, Stage { gpu: 2, layers: 16..32 }],
        };
        let costs = reconstruct_kv(&r, &chain, &kv, &coeffs()).unwrap();
        assert_eq!((costs[0].q_layers, costs[0].full_layers), (16, 0));
        assert!((costs[0].seconds - 80e-6).abs() < 1e-12);
        assert_eq!((costs[1].q_layers, costs[1].full_layers), (0, 16));
        assert!((costs[1].seconds - 240e-6).abs() < 1e-12);
    }

    #[test]
    fn rebuild_with_nothing_lost_is_q_only() {
        let r = request(10, 5);
        let mut kv = KvLedger::new(32);
        kv.write(1, 0..32, 0);
        let costs = reconstruct_kv(&r, &PipelineChain::single(0, 32), &kv, &coeffs()).unwrap();
        let total: f64 = costs.iter().map(|c| c.seconds).sum();
        assert!((total - 32.0 * 15.0 * 1e-6 / 3.0).abs() < 1e-12);
        assert_eq!(costs[0].full_layers, 0);
    }

    #[test]
    fn rebuild_during_prefill_is_plain_prefill() {
        let r = request(64, 0);
        let kv = KvLedger::new(32);
        let costs = reconstruct_kv(&r, &PipelineChain::single(0, 32), &kv, &coeffs()).unwrap();
        assert!((costs[0].seconds - 2.048e-3).abs() < 1e-12);
    }

    #[test]
    fn recovery_time_from_trace() {
        let mut t = Trace::default();
        assert!(matches!(
            measure_recovery_time(&t, RecoveryMetric::NextToken),
            Err(SimError::Query(_))
        ));
        t.push(TraceRecord::Token { time: SimTime(1_000), request: 0, index: 0 });
        t.push(TraceRecord::Crash { time: SimTime(6_000_000_000), gpu: 1 });
        t.push(TraceRecord::Token { time: SimTime(8_000_000_000), request: 0, index: 1 });
        assert_eq!(
            measure_recovery_time(&t, RecoveryMetric::NextToken).unwrap(),
            SimTime(2_000_000_000)
        );
        let mut t2 = Trace::default();
        t2.push(TraceRecord::Crash { time: SimTime(10), gpu: 0 });
        t2.push(TraceRecord::Loaded { time: SimTime(30), gpu: 1, item: crate::planner::LoadItem::Segment(0) });
        assert_eq!(measure_recovery_time(&t2, RecoveryMetric::NextToken).unwrap(), SimTime(20));
    }

    #[test]
    fn full_restart_plan() {
        let plan = full_recovery_baseline(&[0, 3], 4).unwrap();
        assert_eq!(plan.new_orders[&0], vec![0, 1, 2, 3]);
        assert_eq!(plan.new_orders[&3], vec![2, 3, 0, 1]);
    }
}
