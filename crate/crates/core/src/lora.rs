//! Merged-LoRA serving: per-adapter queues, epoch-based adapter switching,
//! stage-by-stage merges, and the eager switching baseline.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::catalog::AdapterId;
use crate::engine::RequestId;
use crate::error::{Result, SimError};
use crate::time::SimTime;

/// Queue key: an adapter, or `None` for requests on the bare base model.
pub type AdapterKey = Option<AdapterId>;

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraMode {
    /// Adapter weights are folded into the base weights; GPUs serve one
    /// adapter at a time.
    #[default]
    Merged,
    /// Adapters stay separate; every adapter batch pays a compute multiplier.
    Unmerged,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraScheduling {
    /// Serve the active adapter for an epoch, then rotate.
    #[default]
    Epoch,
    /// Serve strictly in arrival order, merging on every adapter change.
    Eager,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SwitchPolicy {
    #[default]
    RoundRobinNonEmpty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochConfig {
    pub epoch_length: SimTime,
    pub switch_policy: SwitchPolicy,
    /// A queue waiting longer than this many epochs is served next.
    pub starvation_epochs: u32,
}

impl Default for EpochConfig {
    fn default() -> Self {
        EpochConfig {
            epoch_length: SimTime::from_nanos(50_000_000),
            switch_policy: SwitchPolicy::RoundRobinNonEmpty,
            starvation_epochs: 3,
        }
    }
}

/// FIFO queue per adapter.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AdapterQueues {
    known: BTreeSet<AdapterId>,
    queues: BTreeMap<AdapterKey, VecDeque<RequestId>>,
}

impl AdapterQueues {
    pub fn new(adapters: impl IntoIterator<Item = AdapterId>) -> Self {
        AdapterQueues {
            known: adapters.into_iter().collect(),
            queues: BTreeMap::new(),
        }
    }

    pub fn enqueue_by_adapter(&mut self, request: RequestId, adapter: &AdapterKey) -> Result<()> {
        if let Some(a) = adapter {
            if !self.known.contains(a) {
                return Err(SimError::UnknownAdapter(a.to_string()));
            }
        }
        self.queues.entry(adapter.clone()).or_default().push_back(request);
        Ok(())
    }

    /// Puts a request back at the head of its queue.
    pub fn requeue_front(&mut self, request: RequestId, adapter: &AdapterKey) {
        self.queues.entry(adapter.clone()).or_default().push_front(request);
    }

    pub fn queue(&self, adapter: &AdapterKey) -> Option<&VecDeque<RequestId>> {
        self.queues.get(adapter)
    }

    pub fn queue_mut(&mut self, adapter: &AdapterKey) -> &mut VecDeque<RequestId> {
        self.queues.entry(adapter.clone()).or_default()
    }

    pub fn len(&self, adapter: &AdapterKey) -> usize {
        self.queues.get(adapter).map_or(0, VecDeque::len)
    }

    pub fn total(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn non_empty(&self) -> impl Iterator<Item = &AdapterKey> {
        self.queues.iter().filter(|(_, q)| !q.is_empty()).map(|(k, _)| k)
    }

    /// Adapter of the oldest waiting request, taking ids as arrival order.
    pub fn oldest(&self) -> Option<(&AdapterKey, RequestId)> {
        self.queues
            .iter()
            .filter_map(|(k, q)| q.front().map(|&r| (k, r)))
            .min_by_key(|(_, r)| *r)
    }

    pub fn drain_all(&mut self) -> Vec<(AdapterKey, RequestId)> {
        let mut all: Vec<(AdapterKey, RequestId)> = self
            .queues
            .iter_mut()
            .flat_map(|(k, q)| q.drain(..).map(move |r| (k.clone(), r)))
            .collect();
        all.sort_by_key(|(_, r)| *r);
        all
    }

    pub fn remove(&mut self, request: RequestId) -> bool {
        for q in self.queues.values_mut() {
            if let Some(i) = q.iter().position(|&r| r == request) {
                q.remove(i);
                return true;
            }
        }
        false
    }
}

/// Decides whether an epoch boundary switches adapters.
///
/// `pending` lists adapters that have work, each with the time it started
/// waiting while inactive. Starved adapters go first (longest waiting), then
/// the next adapter after `active` in key order.
pub fn epoch_tick(
    now: SimTime,
    epoch_start: SimTime,
    active: &AdapterKey,
    pending: &[(AdapterKey, SimTime)],
    config: &EpochConfig,
) -> Option<AdapterKey> {
    if now.saturating_sub(epoch_start) < config.epoch_length {
        return None;
    }
    let others: Vec<&(AdapterKey, SimTime)> = pending.iter().filter(|(k, _)| k != active).collect();
    if others.is_empty() {
        return None;
    }
    let limit = SimTime(config.epoch_length.0.saturating_mul(u64::from(config.starvation_epochs)));
    if let Some((k, _)) = others
        .iter()
        .filter(|(_, since)| now.saturating_sub(*since) > limit)
        .min_by_key(|(k, since)| (*since, k.clone()))
    {
        return Some(k.clone());
    }
    let mut keys: Vec<&AdapterKey> = others.iter().map(|(k, _)| k).collect();
    keys.sort();
    keys.iter()
        .find(|k| **k > active)
        .or_else(|| keys.first())
        .map(|k| (*k).clone())
}

/// Unmerge-old plus merge-new cost in seconds.
pub fn merge_seconds(old_bytes: u64, new_bytes: u64, merge_rate: f64) -> f64 {
    (old_bytes + new_bytes) as f64 / merge_rate
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MergeWindow {
    pub start: SimTime,
    pub end: SimTime,
}

/// Merge windows along a chain. Each stage starts once it has finished its
/// last pre-switch batch, and never before the previous stage started.
pub fn apply_switch_sequentially(last_old_batch_done: &[SimTime], merge_secs: &[f64]) -> Vec<MergeWindow> {
    let mut prev_start = SimTime::ZERO;
    last_old_batch_done
        .iter()
        .zip(merge_secs)
        .map(|(&done, &secs)| {
            let start = done.max(prev_start);
            prev_start = start;
            MergeWindow {
                start,
                end: start + SimTime::from_secs_ceil(secs),
            }
        })
        .collect()
}

/// Number of merges when serving `sequence` strictly in order.
pub fn eager_switch_baseline(sequence: &[AdapterKey]) -> usize {
    sequence.windows(2).filter(|w| w[0] != w[1]).count()
}
