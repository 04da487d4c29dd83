//! Base models, their layer segments, and LoRA adapters.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

pub type SegmentId = u32;

/// Name of a LoRA adapter. Requests without an adapter use the bare base model.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AdapterId(pub String);

impl AdapterId {
    pub fn new(id: impl Into<String>) -> Self {
        AdapterId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AdapterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AdapterId {
    fn from(s: &str) -> Self {
        AdapterId(s.to_string())
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointLocation {
    #[default]
    Ssd,
    Dram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub model_id: String,
    pub layer_count: u32,
    pub bytes_per_layer: u64,
    /// Embedding and LM-head bytes. Half is charged to the first layer and the
    /// rest to the last one.
    #[serde(default)]
    pub extra_bytes: u64,
    #[serde(default)]
    pub checkpoint_location: CheckpointLocation,
}

impl ModelSpec {
    pub fn total_bytes(&self) -> u64 {
        u64::from(self.layer_count) * self.bytes_per_layer + self.extra_bytes
    }

    /// Bytes of a single layer including its share of the embedding/head.
    pub fn layer_bytes(&self, layer: u32) -> u64 {
        let mut bytes = self.bytes_per_layer;
        let head = self.extra_bytes / 2;
        if layer == 0 {
            bytes += head;
        }
        if layer + 1 == self.layer_count {
            bytes += self.extra_bytes - head;
        }
        bytes
    }

    pub fn range_bytes(&self, layers: &Range<u32>) -> u64 {
        layers.clone().map(|l| self.layer_bytes(l)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_count == 0 {
            return Err(SimError::config("model.layer_count", "must be at least 1"));
        }
        if self.bytes_per_layer == 0 {
            return Err(SimError::config("model.bytes_per_layer", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub adapter_id: AdapterId,
    pub base_model_id: String,
    #[serde(default = "default_size_fraction")]
    pub size_fraction: f64,
}

fn default_size_fraction() -> f64 {
    1e-4
}

impl AdapterSpec {
    pub fn new(id: &str, base: &ModelSpec) -> Self {
        AdapterSpec {
            adapter_id: AdapterId::new(id),
            base_model_id: base.model_id.clone(),
            size_fraction: default_size_fraction(),
        }
    }

    pub fn total_bytes(&self, model: &ModelSpec) -> u64 {
        (model.total_bytes() as f64 * self.size_fraction).round() as u64
    }

    /// Bytes of this adapter covering `layers`, proportional to base bytes.
    pub fn bytes_for_layers(&self, model: &ModelSpec, layers: &Range<u32>) -> u64 {
        (model.range_bytes(layers) as f64 * self.size_fraction).round() as u64
    }
}

/// A contiguous block of layers, the unit of loading and placement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub segment_id: SegmentId,
    pub layer_range: Range<u32>,
    pub bytes: u64,
}

impl Segment {
    pub fn layers(&self) -> u32 {
        self.layer_range.end - self.layer_range.start
    }
}

/// Splits a model into `parts` contiguous segments whose layer counts differ by
/// at most one. Lower-index segments take the remainder layers.
pub fn partition_model(model: &ModelSpec, parts: u32) -> Result<Vec<Segment>> {
    if parts == 0 || parts > model.layer_count {
        return Err(SimError::Partition {
            layers: model.layer_count,
            parts,
        });
    }
    let base = model.layer_count / parts;
    let extra = model.layer_count % parts;
    let mut start = 0;
    let segments = (0..parts)
        .map(|id| {
            let len = base + u32::from(id < extra);
            let range = start..start + len;
            start += len;
            Segment {
                segment_id: id,
                bytes: model.range_bytes(&range),
                layer_range: range,
            }
        })
        .collect();
    Ok(segments)
}

/// Bundled models: layer counts and fp16 sizes from published parameter counts.
pub fn bundled_model(name: &str) -> Option<ModelSpec> {
    let (params, layers): (f64, u32) = match name {
        "opt-1.3b" => (1.3e9, 24),
        "opt-2.7b" => (2.7e9, 32),
        "opt-6.7b" => (6.7e9, 32),
        "opt-13b" => (13e9, 40),
        "falcon-7b" => (7.0e9, 32),
        "mistral-7b" => (7.3e9, 32),
        _ => return None,
    };
    let total = (params * 2.0) as u64;
    let bytes_per_layer = total / u64::from(layers);
    Some(ModelSpec {
        model_id: name.to_string(),
        layer_count: layers,
        bytes_per_layer,
        extra_bytes: total - bytes_per_layer * u64::from(layers),
        checkpoint_location: CheckpointLocation::Ssd,
    })
}

pub const BUNDLED_MODELS: [&str; 6] = [
    "opt-1.3b",
    "opt-2.7b",
    "opt-6.7b",
    "opt-13b",
    "falcon-7b",
    "mistral-7b",
];
