//! Per-GPU loading orders, loading progress, and the ready-to-infer check.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::catalog::{AdapterId, Segment, SegmentId};
use crate::chain::PipelineChain;
use crate::error::{Result, SimError};
use crate::recovery::find_pipeline_chain;

pub type GpuId = u32;

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadStrategy {
    /// Rotated segment orders so that the first N transfers are disjoint.
    #[default]
    #[serde(rename = "pipeline")]
    PipelineParallel,
    /// Every GPU streams the whole checkpoint and converts it on the GPU.
    #[serde(rename = "full_copy_gpu")]
    FullCopyGpuConvert,
    /// Every GPU receives the whole model, converted on the host first.
    #[serde(rename = "full_copy_cpu")]
    FullCopyCpuConvert,
}

impl LoadStrategy {
    pub const ALL: [LoadStrategy; 3] = [
        LoadStrategy::PipelineParallel,
        LoadStrategy::FullCopyGpuConvert,
        LoadStrategy::FullCopyCpuConvert,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LoadStrategy::PipelineParallel => "pipeline",
            LoadStrategy::FullCopyGpuConvert => "full_copy_gpu",
            LoadStrategy::FullCopyCpuConvert => "full_copy_cpu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.name() == s)
    }

    pub fn is_pipeline(self) -> bool {
        self == LoadStrategy::PipelineParallel
    }
}

impl fmt::Display for LoadStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One unit fetched over a GPU's host link.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LoadItem {
    Segment(SegmentId),
    AdapterPart(AdapterId, SegmentId),
}

impl fmt::Display for LoadItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LoadItem::Segment(s) => write!(f, "seg{s}"),
            LoadItem::AdapterPart(a, s) => write!(f, "{a}-{s}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadPlan {
    pub strategy: LoadStrategy,
    pub orders: Vec<Vec<SegmentId>>,
    pub adapter_orders: Vec<Vec<(AdapterId, SegmentId)>>,
    /// Adapter parts requested on demand, fetched before anything else.
    #[serde(default)]
    pub requested: Vec<Vec<(AdapterId, SegmentId)>>,
}

/// Which GPUs host an instance serving each adapter.
pub type AdapterOwners = BTreeMap<AdapterId, BTreeSet<GpuId>>;

/// Spreads adapters over GPUs: adapter `i` is owned by every GPU `g` with
/// `g % adapters == i`, or by GPU `i % gpus` when adapters outnumber GPUs.
pub fn default_owners(adapters: &[AdapterId], gpu_count: u32) -> AdapterOwners {
    let mut owners = AdapterOwners::new();
    if adapters.is_empty() {
        return owners;
    }
    let a = adapters.len() as u32;
    for (i, id) in adapters.iter().enumerate() {
        let i = i as u32;
        let gpus: BTreeSet<GpuId> = if a >= gpu_count {
            [i % gpu_count].into()
        } else {
            (0..gpu_count).filter(|g| g % a == i).collect()
        };
        owners.insert(id.clone(), gpus);
    }
    owners
}

pub fn owned_by(owners: &AdapterOwners, gpu: GpuId) -> BTreeSet<AdapterId> {
    owners
        .iter()
        .filter(|(_, gpus)| gpus.contains(&gpu))
        .map(|(a, _)| a.clone())
        .collect()
}

pub fn plan_loading(
    strategy: LoadStrategy,
    segments: &[Segment],
    adapters: &[AdapterId],
    owners: &AdapterOwners,
    gpu_count: u32,
) -> Result<LoadPlan> {
    if gpu_count == 0 {
        return Err(SimError::config("cluster.gpu_count", "must be at least 1"));
    }
    let n = segments.len() as u32;
    if strategy.is_pipeline() && n != gpu_count {
        return Err(SimError::Protocol(format!(
            "pipeline loading needs one segment per GPU, got {n} segments for {gpu_count} GPUs"
        )));
    }
    let mut orders = Vec::with_capacity(gpu_count as usize);
    let mut adapter_orders = Vec::with_capacity(gpu_count as usize);
    for g in 0..gpu_count {
        let owned = owned_by(owners, g);
        if strategy.is_pipeline() {
            let order: Vec<SegmentId> = (0..n).map(|i| (g + i) % n).collect();
            let first = order[0];
            let mut parts: Vec<(AdapterId, SegmentId)> =
                adapters.iter().map(|a| (a.clone(), first)).collect();
            for &s in &order[1..] {
                parts.extend(
                    adapters
                        .iter()
                        .filter(|a| owned.contains(*a))
                        .map(|a| (a.clone(), s)),
                );
            }
            orders.push(order);
            adapter_orders.push(parts);
        } else {
            orders.push((0..n).collect());
            let mut parts = Vec::new();
            for s in 0..n {
                parts.extend(
                    adapters
                        .iter()
                        .filter(|a| owned.contains(*a))
                        .map(|a| (a.clone(), s)),
                );
            }
            adapter_orders.push(parts);
        }
    }
    Ok(LoadPlan {
        strategy,
        orders,
        adapter_orders,
        requested: vec![Vec::new(); gpu_count as usize],
    })
}

impl LoadPlan {
    /// Queues an adapter part on `gpu` ahead of the regular order.
    pub fn request_adapter_part(&mut self, gpu: GpuId, adapter: &AdapterId, segment: SegmentId) {
        let part = (adapter.clone(), segment);
        let queue = &mut self.requested[gpu as usize];
        if !queue.contains(&part) {
            queue.push(part);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GpuState {
    pub gpu_id: GpuId,
    pub loaded_segments: BTreeSet<SegmentId>,
    pub loaded_adapter_parts: BTreeSet<(AdapterId, SegmentId)>,
    pub hbm_used: u64,
    pub alive: bool,
}

impl GpuState {
    pub fn new(gpu_id: GpuId) -> Self {
        GpuState {
            gpu_id,
            loaded_segments: BTreeSet::new(),
            loaded_adapter_parts: BTreeSet::new(),
            hbm_used: 0,
            alive: true,
        }
    }

    pub fn holds_all(&self, segment_count: u32) -> bool {
        (0..segment_count).all(|s| self.loaded_segments.contains(&s))
    }

    pub fn holds_adapter(&self, adapter: &AdapterId, segment_count: u32) -> bool {
        (0..segment_count).all(|s| self.loaded_adapter_parts.contains(&(adapter.clone(), s)))
    }

    pub fn holds(&self, item: &LoadItem) -> bool {
        match item {
            LoadItem::Segment(s) => self.loaded_segments.contains(s),
            LoadItem::AdapterPart(a, s) => self.loaded_adapter_parts.contains(&(a.clone(), *s)),
        }
    }

    /// Drops all resident state, as after a crash.
    pub fn wipe(&mut self) {
        self.loaded_segments.clear();
        self.loaded_adapter_parts.clear();
        self.hbm_used = 0;
    }
}

/// The next item `state` should fetch under `plan`, if any.
///
/// Requested parts go first. Otherwise the base order is walked and, right
/// after each loaded segment, the adapter parts for that segment are due.
pub fn next_transfer(plan: &LoadPlan, state: &GpuState) -> Option<LoadItem> {
    let g = state.gpu_id as usize;
    let part_due = |a: &AdapterId, s: SegmentId| {
        state.loaded_segments.contains(&s)
            && !state.loaded_adapter_parts.contains(&(a.clone(), s))
    };
    if let Some((a, s)) = plan.requested[g].iter().find(|(a, s)| part_due(a, *s)) {
        return Some(LoadItem::AdapterPart(a.clone(), *s));
    }
    for &seg in &plan.orders[g] {
        if !state.loaded_segments.contains(&seg) {
            return Some(LoadItem::Segment(seg));
        }
        if let Some((a, s)) = plan.adapter_orders[g]
            .iter()
            .find(|(a, s)| *s == seg && part_due(a, *s))
        {
            return Some(LoadItem::AdapterPart(a.clone(), *s));
        }
    }
    None
}

/// A complete chain over the loaded segments, if one exists.
pub fn ready_to_infer(states: &[GpuState], segments: &[Segment]) -> Option<PipelineChain> {
    find_pipeline_chain(states, segments)
}

/// Removes adapter parts of adapters this GPU does not serve once it holds
/// the full base model.
pub fn discard_surplus_adapter_parts(
    state: &GpuState,
    owned: &BTreeSet<AdapterId>,
    segment_count: u32,
    part_bytes: impl Fn(&AdapterId, SegmentId) -> u64,
) -> Result<GpuState> {
    if !state.holds_all(segment_count) {
        return Err(SimError::Protocol(format!(
            "GPU {} cannot discard adapter parts before holding the full model",
            state.gpu_id
        )));
    }
    let mut next = state.clone();
    let (keep, drop): (BTreeSet<_>, BTreeSet<_>) = state
        .loaded_adapter_parts
        .iter()
        .cloned()
        .partition(|(a, _)| owned.contains(a));
    let freed: u64 = drop.iter().map(|(a, s)| part_bytes(a, *s)).sum();
    next.loaded_adapter_parts = keep;
    next.hbm_used = next.hbm_used.saturating_sub(freed);
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{partition_model, CheckpointLocation, ModelSpec};

    fn segs(layers: u32, parts: u32) -> Vec<Segment> {
        let m = ModelSpec {
            model_id: "m".into(),
            layer_count: layers,
            bytes_per_layer: 10,
            extra_bytes: 0,
            checkpoint_location: CheckpointLocation::Dram,
        };
        partition_model(&m, parts).unwrap()
    }

    fn ids(names: &[&str]) -> Vec<AdapterId> {
        names.iter().map(|n| AdapterId::from(*n)).collect()
    }

    #[test]
    fn rotation_orders_for_four_gpus() {
        let plan = plan_loading(
            LoadStrategy::PipelineParallel,
            &segs(32, 4),
            &[],
            &AdapterOwners::new(),
            4,
        )
        .unwrap();
        assert_eq!(
            plan.orders,
            vec![vec![0, 1, 2, 3], vec![1, 2, 3, 0], vec![2, 3, 0, 1], vec![3, 0, 1, 2]]
        );
    }

    #[test]
    fn adapter_parts_follow_rotation_position() {
        let adapters = ids(&["B", "C"]);
        let owners = default_owners(&adapters, 2);
        assert_eq!(owners[&AdapterId::from("B")], [0].into());
        let plan =
            plan_loading(LoadStrategy::PipelineParallel, &segs(32, 2), &adapters, &owners, 2).unwrap();
        let b = AdapterId::from("B");
        let c = AdapterId::from("C");
        assert_eq!(plan.adapter_orders[0][..2], [(b.clone(), 0), (c.clone(), 0)]);
        assert_eq!(plan.adapter_orders[1][..2], [(b.clone(), 1), (c.clone(), 1)]);
        assert_eq!(plan.adapter_orders[0][2], (b, 1));
        assert_eq!(plan.adapter_orders[1][2], (c, 0));
    }

    #[test]
    fn full_copy_orders_are_identity() {
        for strategy in [LoadStrategy::FullCopyGpuConvert, LoadStrategy::FullCopyCpuConvert] {
            let plan = plan_loading(strategy, &segs(32, 2), &[], &AdapterOwners::new(), 2).unwrap();
            assert_eq!(plan.orders, vec![vec![0, 1], vec![0, 1]]);
        }
    }

    #[test]
    fn next_transfer_walks_the_order() {
        let plan =
            plan_loading(LoadStrategy::PipelineParallel, &segs(32, 4), &[], &AdapterOwners::new(), 4)
                .unwrap();
        let mut st = GpuState::new(1);
        st.loaded_segments.insert(1);
        assert_eq!(next_transfer(&plan, &st), Some(LoadItem::Segment(2)));
        st.loaded_segments.extend([0, 2, 3]);
        assert_eq!(next_transfer(&plan, &st), None);
    }

    #[test]
    fn adapter_part_comes_right_after_its_segment() {
        let adapters = ids(&["B", "C"]);
        let owners = default_owners(&adapters, 2);
        let plan =
            plan_loading(LoadStrategy::PipelineParallel, &segs(32, 2), &adapters, &owners, 2).unwrap();
        let mut st = GpuState::new(0);
        assert_eq!(next_transfer(&plan, &st), Some(LoadItem::Segment(0)));
        st.loaded_segments.insert(0);
        assert_eq!(next_transfer(&plan, &st), Some(LoadItem::AdapterPart("B".into(), 0)));
        st.loaded_adapter_parts.insert(("B".into(), 0));
        assert_eq!(next_transfer(&plan, &st), Some(LoadItem::AdapterPart("C".into(), 0)));
        st.loaded_adapter_parts.insert(("C".into(), 0));
        assert_eq!(next_transfer(&plan, &st), Some(LoadItem::Segment(1)));
    }

    #[test]
    fn requested_parts_jump_the_queue() {
        let adapters = ids(&["B", "C"]);
        let owners = default_owners(&adapters, 2);
        let mut plan =
            plan_loading(LoadStrategy::PipelineParallel, &segs(32, 2), &adapters, &owners, 2).unwrap();
        let mut st = GpuState::new(0);
        st.loaded_segments.insert(0);
        st.loaded_adapter_parts.insert(("B".into(), 0));
        st.loaded_segments.insert(1);
        plan.request_adapter_part(0, &"C".into(), 1);
        assert_eq!(next_transfer(&plan, &st), Some(LoadItem::AdapterPart("C".into(), 1)));
    }

    #[test]
    fn ready_examples() {
        let s = segs(32, 2);
        let mut a = GpuState::new(0);
        let mut b = GpuState::new(1);
        a.loaded_segments.insert(0);
        assert!(ready_to_infer(&[a.clone(), b.clone()], &s).is_none());
        b.loaded_segments.insert(1);
        let chain = ready_to_infer(&[a.clone(), b], &s).unwrap();
        assert_eq!(chain.stages.len(), 2);
        assert_eq!((chain.stages[0].gpu, chain.stages[0].layers.clone()), (0, 0..16));
        assert_eq!((chain.stages[1].gpu, chain.stages[1].layers.clone()), (1, 16..32));
        a.loaded_segments.insert(1);
        let chain = ready_to_infer(&[a], &s).unwrap();
        assert_eq!(chain.stages.len(), 1);
    }

    #[test]
    fn discard_keeps_owned_parts() {
        let mut st = GpuState::new(0);
        st.loaded_segments.extend([0, 1]);
        st.loaded_adapter_parts
            .extend([("B".into(), 0), ("B".into(), 1), ("C".into(), 0)]);
        st.hbm_used = 1000;
        let owned: BTreeSet<AdapterId> = ["B".into()].into();
        let next = discard_surplus_adapter_parts(&st, &owned, 2, |_, _| 7).unwrap();
        assert_eq!(
            next.loaded_adapter_parts,
            [("B".into(), 0), ("B".into(), 1)].into()
        );
        assert_eq!(next.hbm_used, 993);
        let again = discard_surplus_adapter_parts(&next, &owned, 2, |_, _| 7).unwrap();
        assert_eq!(again, next);
    }

    #[test]
    fn discard_four_gpu_case() {
        let mut st = GpuState::new(2);
        st.loaded_segments.extend(0..4);
        for a in ["B", "C", "D"] {
            st.loaded_adapter_parts.insert((a.into(), 2));
        }
        for s in [0, 1, 3] {
            st.loaded_adapter_parts.insert(("C".into(), s));
        }
        let owned: BTreeSet<AdapterId> = ["C".into()].into();
        let next = discard_surplus_adapter_parts(&st, &owned, 4, |_, _| 0).unwrap();
        let expected: BTreeSet<_> = (0..4).map(|s| (AdapterId::from("C"), s)).collect();
        assert_eq!(next.loaded_adapter_parts, expected);
    }

    #[test]
    fn discard_before_full_load_is_protocol_error() {
        let mut st = GpuState::new(0);
        st.loaded_segments.insert(0);
        let err = discard_surplus_adapter_parts(&st, &BTreeSet::new(), 2, |_, _| 0).unwrap_err();
        assert!(matches!(err, SimError::Protocol(_)));
    }
}
