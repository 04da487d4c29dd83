//! Switching from pipelined inference to independent per-GPU inference once
//! every GPU holds a full copy.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::engine::BatchId;
use crate::error::{Result, SimError};
use crate::lora::AdapterKey;
use crate::planner::{owned_by, AdapterOwners, GpuId, GpuState};
use crate::time::SimTime;

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServingMode {
    #[default]
    PipelineParallel,
    SingleGpu,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchTarget {
    #[default]
    SingleGpu,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SwitchState {
    pub mode: ServingMode,
    pub switch_time: Option<SimTime>,
    /// Pipeline batches admitted before the switch; they finish on the chain.
    pub drain_set: BTreeSet<BatchId>,
}

impl SwitchState {
    pub fn fire(&mut self, now: SimTime, in_flight: impl IntoIterator<Item = BatchId>) -> Result<()> {
        if self.mode == ServingMode::SingleGpu {
            return Err(SimError::Protocol("strategy switch fired twice".into()));
        }
        self.mode = ServingMode::SingleGpu;
        self.switch_time = Some(now);
        self.drain_set = in_flight.into_iter().collect();
        Ok(())
    }
}

/// True when every alive GPU holds the whole model and its own adapters.
pub fn check_switch(states: &[GpuState], owners: &AdapterOwners, segment_count: u32) -> bool {
    let mut alive = states.iter().filter(|s| s.alive).peekable();
    alive.peek().is_some()
        && alive.all(|s| {
            s.holds_all(segment_count)
                && owned_by(owners, s.gpu_id)
                    .iter()
                    .all(|a| s.holds_adapter(a, segment_count))
        })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExecutionTarget {
    Chain,
    Gpu(GpuId),
}

/// A GPU that can take post-switch work.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteCandidate {
    pub gpu: GpuId,
    pub active: AdapterKey,
    /// Seconds needed before this GPU can serve the adapter (merge and any
    /// missing adapter loads).
    pub switch_cost: f64,
}

/// Round-robin placement with adapter affinity.
#[derive(Debug, Clone, Default)]
pub struct Router {
    cursor: usize,
}

impl Router {
    /// Where `batch` runs: on the chain before the switch or when it is
    /// draining, otherwise on one GPU.
    pub fn route_batch(
        &mut self,
        batch: BatchId,
        state: &SwitchState,
        adapter: &AdapterKey,
        candidates: &[RouteCandidate],
    ) -> Option<ExecutionTarget> {
        if state.mode == ServingMode::PipelineParallel || state.drain_set.contains(&batch) {
            return Some(ExecutionTarget::Chain);
        }
        self.pick(adapter, candidates).map(ExecutionTarget::Gpu)
    }

    /// Picks a GPU: one whose merged adapter matches if any, else the one
    /// with the cheapest switch. Ties rotate.
    pub fn pick(&mut self, adapter: &AdapterKey, candidates: &[RouteCandidate]) -> Option<GpuId> {
        if candidates.is_empty() {
            return None;
        }
        let n = candidates.len();
        let rotated = (0..n).map(|i| &candidates[(self.cursor + i) % n]);
        let best = if candidates.iter().any(|c| &c.active == adapter) {
            rotated.clone().position(|c| &c.active == adapter)
        } else {
            let min = candidates
                .iter()
                .map(|c| c.switch_cost)
                .fold(f64::INFINITY, f64::min);
            rotated.clone().position(|c| c.switch_cost <= min)
        }?;
        let index = (self.cursor + best) % n;
        self.cursor = index + 1;
        Some(candidates[index].gpu)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::AdapterId;

    fn full(gpu: GpuId, n: u32) -> GpuState {
        let mut s = GpuState::new(gpu);
        s.loaded_segments.extend(0..n);
        s
    }

    #[test]
    fn switch_needs_every_alive_gpu_full() {
        let owners = AdapterOwners::new();
        assert!(check_switch(&[full(0, 2), full(1, 2)], &owners, 2));
        let mut partial = full(1, 2);
        partial.loaded_segments.remove(&0);
        assert!(!check_switch(&[full(0, 2), partial], &owners, 2));
        let mut dead = GpuState::new(1);
        dead.alive = false;
        let states = [full(0, 4), dead, full(2, 4), full(3, 4)];
        assert!(check_switch(&states, &owners, 4));
    }

    #[test]
    fn switch_waits_for_owned_adapter() {
        let b = AdapterId::from("B");
        let owners: AdapterOwners = [(b.clone(), [0].into())].into();
        let mut s = full(0, 2);
        assert!(!check_switch(&[s.clone()], &owners, 2));
        s.loaded_adapter_parts.extend([(b.clone(), 0), (b, 1)]);
        assert!(check_switch(&[s], &owners, 2));
    }

    #[test]
    fn fires_once() {
        let mut st = SwitchState::default();
        st.fire(SimTime(5), [1, 2]).unwrap();
        assert!(st.fire(SimTime(6), []).is_err());
        assert_eq!(st.switch_time, Some(SimTime(5)));
    }

    fn cand(gpu: GpuId, active: Option<&str>, cost: f64) -> RouteCandidate {
        RouteCandidate {
            gpu,
            active: active.map(AdapterId::from),
            switch_cost: cost,
        }
    }

    #[test]
    fn routing_examples() {
        let mut router = Router::default();
        let mut st = SwitchState::default();
        let cands = [cand(0, None, 0.0), cand(1, None, 0.0)];
        assert_eq!(router.route_batch(7, &st, &None, &cands), Some(ExecutionTarget::Chain));
        st.fire(SimTime(1), [7]).unwrap();
        assert_eq!(router.route_batch(7, &st, &None, &cands), Some(ExecutionTarget::Chain));
        assert_eq!(router.route_batch(8, &st, &None, &cands), Some(ExecutionTarget::Gpu(0)));
        assert_eq!(router.route_batch(9, &st, &None, &cands), Some(ExecutionTarget::Gpu(1)));

        let c = Some(AdapterId::from("C"));
        let cands = [cand(0, Some("B"), 0.01), cand(1, Some("C"), 0.01)];
        assert_eq!(router.pick(&c, &cands), Some(1));
        assert_eq!(router.pick(&c, &cands), Some(1));
        let cands = [cand(0, Some("B"), 0.02), cand(1, Some("D"), 0.01)];
        assert_eq!(router.pick(&c, &cands), Some(1));
    }
}
