use std::collections::BTreeMap;
use std::ops::Range;

use crate::chain::PipelineChain;
use crate::engine::RequestId;
use crate::planner::GpuId;

/// Which GPU holds the KV cache of each (request, layer).
///
/// Stored as one GPU bitmask per layer, so at most 64 GPUs are supported.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvLedger {
    layer_count: u32,
    masks: BTreeMap<RequestId, Vec<u64>>,
}

impl KvLedger {
    pub const MAX_GPUS: u32 = 64;

    pub fn new(layer_count: u32) -> Self {
        KvLedger {
            layer_count,
            masks: BTreeMap::new(),
        }
    }

    pub fn write(&mut self, request: RequestId, layers: Range<u32>, gpu: GpuId) {
        let n = self.layer_count as usize;
        let masks = self.masks.entry(request).or_insert_with(|| vec![0; n]);
        for l in layers {
            masks[l as usize] |= 1 << gpu;
        }
    }

    pub fn has(&self, request: RequestId, layer: u32, gpu: GpuId) -> bool {
        self.masks
            .get(&request)
            .is_some_and(|m| m[layer as usize] & (1 << gpu) != 0)
    }

    /// Layers of `layers` that have no entry on `gpu`.
    pub fn missing(&self, request: RequestId, layers: Range<u32>, gpu: GpuId) -> u32 {
        layers.filter(|&l| !self.has(request, l, gpu)).count() as u32
    }

    /// True when every layer has an entry on the GPU that runs it in `chain`.
    pub fn complete_for(&self, request: RequestId, chain: &PipelineChain) -> bool {
        chain
            .stages
            .iter()
            .all(|s| self.missing(request, s.layers.clone(), s.gpu) == 0)
    }

    /// Drops every entry on `gpu`, returning how many were removed.
    pub fn remove_gpu(&mut self, gpu: GpuId) -> usize {
        let bit = 1u64 << gpu;
        let mut removed = 0;
        for masks in self.masks.values_mut() {
            for m in masks.iter_mut() {
                if *m & bit != 0 {
                    *m &= !bit;
                    removed += 1;
                }
            }
        }
        removed
    }

    pub fn remove_request(&mut self, request: RequestId) {
        self.masks.remove(&request);
    }

    pub fn clear(&mut self) {
        self.masks.clear();
    }

    /// Number of entries for `request`.
    pub fn count(&self, request: RequestId) -> usize {
        self.masks
            .get(&request)
            .map_or(0, |m| m.iter().map(|x| x.count_ones() as usize).sum())
    }

    /// All entries in (request, layer, gpu) order.
    pub fn entries(&self) -> impl Iterator<Item = (RequestId, u32, GpuId)> + '_ {
        self.masks.iter().flat_map(|(&r, masks)| {
            masks.iter().enumerate().flat_map(move |(l, &m)| {
                (0..Self::MAX_GPUS)
                    .filter(move |g| m & (1 << g) != 0)
                    .map(move |g| (r, l as u32, g))
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::Stage;

    #[test]
    fn crash_removes_only_that_gpu() {
        let mut kv = KvLedger::new(4);
        kv.write(7, 0..2, 0);
        kv.write(7, 2..4, 1);
        let chain = PipelineChain {
            stages: vec![Stage { gpu: 0, layers: 0..2 }, Stage { gpu: 1, layers: 2..4 }],
        };
        assert!(kv.complete_for(7, &chain));
        assert_eq!(kv.remove_gpu(1), 2);
        assert!(!kv.complete_for(7, &chain));
        assert_eq!(kv.missing(7, 0..4, 0), 2);
        assert_eq!(kv.entries().collect::<Vec<_>>(), vec![(7, 0, 0), (7, 1, 0)]);
        kv.remove_request(7);
        assert_eq!(kv.count(7), 0);
    }
}
