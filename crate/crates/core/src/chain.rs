use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::planner::GpuId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub gpu: GpuId,
    pub layers: Range<u32>,
}

impl Stage {
    pub fn layer_count(&self) -> u32 {
        self.layers.end - self.layers.start
    }
}

/// Ordered pipeline stages covering every layer of the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineChain {
    pub stages: Vec<Stage>,
}

impl PipelineChain {
    pub fn single(gpu: GpuId, layer_count: u32) -> Self {
        PipelineChain {
            stages: vec![Stage {
                gpu,
                layers: 0..layer_count,
            }],
        }
    }

    pub fn contains_gpu(&self, gpu: GpuId) -> bool {
        self.stages.iter().any(|s| s.gpu == gpu)
    }

    pub fn gpus(&self) -> impl Iterator<Item = GpuId> + '_ {
        self.stages.iter().map(|s| s.gpu)
    }

    /// GPU that runs `layer`.
    pub fn gpu_for_layer(&self, layer: u32) -> Option<GpuId> {
        self.stages
            .iter()
            .find(|s| s.layers.contains(&layer))
            .map(|s| s.gpu)
    }

    pub fn validate(&self, layer_count: u32) -> Result<()> {
        let mut cursor = 0;
        for stage in &self.stages {
            if stage.layers.start != cursor || stage.layers.end <= stage.layers.start {
                return Err(SimError::Protocol(format!(
                    "chain stage on GPU {} covers {:?}, expected to start at layer {cursor}",
                    stage.gpu, stage.layers
                )));
            }
            cursor = stage.layers.end;
        }
        if cursor != layer_count {
            return Err(SimError::Protocol(format!(
                "chain ends at layer {cursor} of {layer_count}"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for PipelineChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.stages.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "gpu{}[{}..{})", s.gpu, s.layers.start, s.layers.end)?;
        }
        Ok(())
    }
}
