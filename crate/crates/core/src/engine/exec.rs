use std::collections::VecDeque;

use crate::chain::PipelineChain;
use crate::cluster::{decode_step_time, prefill_time, transfer_time, ClusterSpec, ComputeCoefficients};
use crate::engine::{BatchPhase, RequestId};
use crate::error::{Result, SimError};
use crate::planner::{GpuId, GpuState};

/// Hidden-state hand-off to the next stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Hop {
    pub to: GpuId,
    pub bytes: u64,
    pub seconds: f64,
}

/// Cost of one batch on one pipeline stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageWork {
    pub gpu: GpuId,
    pub layers: u32,
    pub compute: f64,
    pub hop: Option<Hop>,
}

fn with_hops(
    chain: &PipelineChain,
    hop_tokens: u64,
    cluster: &ClusterSpec,
    coeffs: &ComputeCoefficients,
    mut compute: impl FnMut(usize, u32) -> Result<f64>,
) -> Result<Vec<StageWork>> {
    let bytes = hop_tokens * coeffs.hidden_state_bytes_per_token;
    let hop_secs = transfer_time(
        bytes,
        cluster.interconnect_bandwidth,
        cluster.interconnect_base_latency,
    )?;
    chain
        .stages
        .iter()
        .enumerate()
        .map(|(i, stage)| {
            let layers = stage.layer_count();
            let hop = chain
                .stages
                .get(i + 1)
                .filter(|next| next.gpu != stage.gpu)
                .map(|next| Hop {
                    to: next.gpu,
                    bytes,
                    seconds: hop_secs,
                });
            Ok(StageWork {
                gpu: stage.gpu,
                layers,
                compute: compute(i, layers)?,
                hop,
            })
        })
        .collect()
}

/// Per-stage prefill cost of a batch with the given prompt lengths.
pub fn execute_prefill(
    prompts: &[u64],
    chain: &PipelineChain,
    cluster: &ClusterSpec,
    coeffs: &ComputeCoefficients,
) -> Result<Vec<StageWork>> {
    let tokens: u64 = prompts.iter().sum();
    with_hops(chain, tokens, cluster, coeffs, |_, layers| {
        prefill_time(layers, tokens, 1, coeffs)
    })
}

/// Per-stage cost of one decode step; hops carry one token per request.
pub fn execute_decode_step(
    batch_len: u64,
    chain: &PipelineChain,
    cluster: &ClusterSpec,
    coeffs: &ComputeCoefficients,
) -> Result<Vec<StageWork>> {
    with_hops(chain, batch_len, cluster, coeffs, |_, layers| {
        decode_step_time(layers, batch_len, coeffs)
    })
}

/// Whole-model execution on one GPU holding a full copy.
pub fn single_gpu_execute(
    phase: BatchPhase,
    tokens: &[u64],
    gpu: &GpuState,
    segment_count: u32,
    layer_count: u32,
    cluster: &ClusterSpec,
    coeffs: &ComputeCoefficients,
) -> Result<StageWork> {
    if !gpu.alive || !gpu.holds_all(segment_count) {
        return Err(SimError::Protocol(format!(
            "GPU {} has no full model copy",
            gpu.gpu_id
        )));
    }
    let chain = PipelineChain::single(gpu.gpu_id, layer_count);
    let mut work = match phase {
        BatchPhase::Decode => execute_decode_step(tokens.len() as u64, &chain, cluster, coeffs)?,
        _ => execute_prefill(tokens, &chain, cluster, coeffs)?,
    };
    Ok(work.remove(0))
}

/// Admits queued requests into a running set capped at `max_batch`.
pub fn continuous_batch_admit(
    queue: &mut VecDeque<RequestId>,
    running: usize,
    max_batch: usize,
) -> Vec<RequestId> {
    let room = max_batch.saturating_sub(running).min(queue.len());
    queue.drain(..room).collect()
}
