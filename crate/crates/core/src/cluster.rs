//! Hardware topology and the analytic cost model.
//!
//! Every data movement is an affine channel (`base_latency + bytes /
//! bandwidth`) and every compute step is linear in layers, tokens and batch
//! size. There are no congestion curves: the interesting behaviour comes from
//! how many bytes cross which link, not from link physics.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

/// Bytes per gibibyte, handy for configs and tests.
pub const GIB: f64 = 1024.0 * 1024.0 * 1024.0;

/// One GPU server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterSpec {
    pub gpu_count: u32,
    /// HBM per GPU, bytes.
    pub hbm_capacity: u64,
    /// Dedicated CPU-to-GPU link per GPU, bytes/s.
    pub pcie_bandwidth: f64,
    /// GPU-to-GPU hop used for hidden-state hand-off, bytes/s.
    pub interconnect_bandwidth: f64,
    /// Fixed cost of a single GPU-to-GPU hop, seconds.
    pub interconnect_base_latency: f64,
    /// Aggregate host memory bandwidth shared by all PCIe links, bytes/s.
    pub dram_bandwidth: f64,
    pub ssd_bandwidth: f64,
    /// Checkpoint-to-parameter conversion throughput, bytes/s.
    pub convert_rate: f64,
}

impl Default for ClusterSpec {
    /// A two-GPU A100-class server: PCIe 4.0 x16 per GPU, NVMe checkpoint
    /// store, GPU-side conversion at roughly 5 GB/s.
    fn default() -> Self {
        ClusterSpec {
            gpu_count: 2,
            hbm_capacity: 40 * 1024 * 1024 * 1024,
            pcie_bandwidth: 32e9,
            interconnect_bandwidth: 16e9,
            interconnect_base_latency: 100e-6,
            dram_bandwidth: 200e9,
            ssd_bandwidth: 13e9,
            convert_rate: 5e9,
        }
    }
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.gpu_count == 0 {
            return Err(SimError::config("cluster.gpu_count", "must be at least 1"));
        }
        if self.hbm_capacity == 0 {
            return Err(SimError::config("cluster.hbm_capacity", "must be positive"));
        }
        let rates = [
            ("cluster.pcie_bandwidth", self.pcie_bandwidth),
            ("cluster.interconnect_bandwidth", self.interconnect_bandwidth),
            ("cluster.dram_bandwidth", self.dram_bandwidth),
            ("cluster.ssd_bandwidth", self.ssd_bandwidth),
            ("cluster.convert_rate", self.convert_rate),
        ];
        for (field, value) in rates {
            if !(value.is_finite() && value > 0.0) {
                return Err(SimError::config(field, format!("must be positive, got {value}")));
            }
        }
        if !(self.interconnect_base_latency.is_finite() && self.interconnect_base_latency >= 0.0) {
            return Err(SimError::config(
                "cluster.interconnect_base_latency",
                "must be a non-negative number of seconds",
            ));
        }
        Ok(())
    }

    /// Per-link CPU-to-GPU rate once every GPU streams at the same time.
    ///
    /// Host memory is shared, so `gpu_count` concurrent readers each get at
    /// most an equal share of `dram_bandwidth`.
    pub fn effective_pcie_bandwidth(&self) -> f64 {
        self.pcie_bandwidth
            .min(self.dram_bandwidth / f64::from(self.gpu_count.max(1)))
    }
}

/// Calibration knobs for compute costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComputeCoefficients {
    /// Seconds per (layer x prompt token) of prefill.
    pub prefill_per_layer_token: f64,
    /// Seconds per (layer x batch element) of one decode step.
    pub decode_per_layer: f64,
    /// Cost of recomputing only Q over a layer whose KV cache survived,
    /// relative to a full prefill of that layer.
    pub q_recompute_factor: f64,
    pub hidden_state_bytes_per_token: u64,
    /// Adapter bytes folded into (or out of) base weights per second.
    pub merge_rate: f64,
}

impl Default for ComputeCoefficients {
    /// Values for a 7B model on an A100: a 64x64-token prefill over 32 layers
    /// takes about 0.2 s, a 4096-wide fp16 hidden state is 8 KiB per token.
    fn default() -> Self {
        ComputeCoefficients {
            prefill_per_layer_token: 1.5e-6,
            decode_per_layer: 30e-6,
            q_recompute_factor: 1.0 / 3.0,
            hidden_state_bytes_per_token: 8192,
            merge_rate: 1.5e8,
        }
    }
}

impl ComputeCoefficients {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("compute.prefill_per_layer_token", self.prefill_per_layer_token),
            ("compute.decode_per_layer", self.decode_per_layer),
            ("compute.merge_rate", self.merge_rate),
        ];
        for (field, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(SimError::config(field, format!("must be positive, got {value}")));
            }
        }
        if !(self.q_recompute_factor > 0.0 && self.q_recompute_factor < 1.0) {
            return Err(SimError::config(
                "compute.q_recompute_factor",
                format!("must lie strictly between 0 and 1, got {}", self.q_recompute_factor),
            ));
        }
        if self.hidden_state_bytes_per_token == 0 {
            return Err(SimError::config(
                "compute.hidden_state_bytes_per_token",
                "must be positive",
            ));
        }
        Ok(())
    }
}

/// Time to move `bytes` over a channel: `base_latency + bytes / bandwidth`.
pub fn transfer_time(bytes: u64, bandwidth: f64, base_latency: f64) -> Result<f64> {
    if !(bandwidth.is_finite() && bandwidth > 0.0) {
        return Err(SimError::config(
            "bandwidth",
            format!("must be positive, got {bandwidth}"),
        ));
    }
    if !(base_latency >= 0.0) {
        return Err(SimError::config("base_latency", "must be non-negative"));
    }
    Ok(base_latency + bytes as f64 / bandwidth)
}

/// Full prefill of `tokens` tokens for each of `batch` requests over `layers`.
pub fn prefill_time(layers: u32, tokens: u64, batch: u64, coeffs: &ComputeCoefficients) -> Result<f64> {
    if layers == 0 {
        return Err(SimError::Domain("prefill over zero layers".into()));
    }
    if tokens == 0 || batch == 0 {
        return Err(SimError::Domain("prefill needs at least one token and one request".into()));
    }
    Ok(f64::from(layers) * tokens as f64 * batch as f64 * coeffs.prefill_per_layer_token)
}

/// One decode step for `batch` requests over `layers`.
pub fn decode_step_time(layers: u32, batch: u64, coeffs: &ComputeCoefficients) -> Result<f64> {
    if layers == 0 {
        return Err(SimError::Domain("decode step over zero layers".into()));
    }
    if batch == 0 {
        return Err(SimError::Domain("decode step with an empty batch".into()));
    }
    Ok(f64::from(layers) * batch as f64 * coeffs.decode_per_layer)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn us(coeff: f64) -> ComputeCoefficients {
        ComputeCoefficients {
            prefill_per_layer_token: coeff * 1e-6,
            decode_per_layer: 2e-6,
            ..ComputeCoefficients::default()
        }
    }

    #[test]
    fn transfer_examples() {
        let t = transfer_time((32.0 * GIB) as u64, 32.0 * GIB, 0.0).unwrap();
        assert!((t - 1.0).abs() < 1e-12);
        let t = transfer_time(0, 1e9, 10e-6).unwrap();
        assert!((t - 10e-6).abs() < 1e-15);
        // Two parallel links each carrying half of a 13 GiB checkpoint.
        let per_link = transfer_time((6.5 * GIB) as u64, 32.0 * GIB, 0.0).unwrap();
        assert!((per_link - 0.203125).abs() < 1e-12);
    }

    #[test]
    fn transfer_rejects_bad_bandwidth() {
        assert!(matches!(transfer_time(1, 0.0, 0.0), Err(SimError::Config { .. })));
        assert!(matches!(transfer_time(1, -5.0, 0.0), Err(SimError::Config { .. })));
        assert!(transfer_time(1, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn transfer_is_additive_without_base_latency() {
        let whole = transfer_time(12_000, 3.0e3, 0.0).unwrap();
        let parts: f64 = [5_000u64, 4_000, 3_000]
            .iter()
            .map(|b| transfer_time(*b, 3.0e3, 0.0).unwrap())
            .sum();
        assert!((whole - parts).abs() < 1e-12);
    }

    #[test]
    fn prefill_examples() {
        let c = us(1.0);
        assert!((prefill_time(32, 64, 1, &c).unwrap() - 2.048e-3).abs() < 1e-12);
        assert!((prefill_time(1, 1, 1, &c).unwrap() - 1e-6).abs() < 1e-18);
        // Q-only recompute over 16 cached layers of a 15-token sequence.
        let q = prefill_time(16, 15, 1, &c).unwrap() * (1.0 / 3.0);
        assert!((q - 80e-6).abs() < 1e-12);
        assert!(matches!(prefill_time(0, 4, 1, &c), Err(SimError::Domain(_))));
    }

    #[test]
    fn decode_examples() {
        let c = us(1.0);
        assert!((decode_step_time(32, 1, &c).unwrap() - 64e-6).abs() < 1e-15);
        assert!((decode_step_time(32, 64, &c).unwrap() - 4.096e-3).abs() < 1e-12);
        assert!((decode_step_time(16, 8, &c).unwrap() - 256e-6).abs() < 1e-12);
        assert!(decode_step_time(0, 1, &c).is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut spec = ClusterSpec::default();
        assert!(spec.validate().is_ok());
        spec.gpu_count = 0;
        assert!(spec.validate().is_err());
        let mut spec = ClusterSpec::default();
        spec.convert_rate = 0.0;
        let err = spec.validate().unwrap_err();
        assert!(err.to_string().contains("cluster.convert_rate"));

        let mut c = ComputeCoefficients::default();
        assert!(c.validate().is_ok());
        c.q_recompute_factor = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn shared_dram_caps_links() {
        let spec = ClusterSpec {
            gpu_count: 8,
            pcie_bandwidth: 32e9,
            dram_bandwidth: 128e9,
            ..ClusterSpec::default()
        };
        assert_eq!(spec.effective_pcie_bandwidth(), 16e9);
        let spec = ClusterSpec::default();
        assert_eq!(spec.effective_pcie_bandwidth(), 32e9);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn costs_are_monotone(layers in 1u32..80, tokens in 1u64..4096, batch in 1u64..256) {
                let c = ComputeCoefficients::default();
                let base = prefill_time(layers, tokens, batch, &c).unwrap();
                prop_assert!(prefill_time(layers + 1, tokens, batch, &c).unwrap() >= base);
                prop_assert!(prefill_time(layers, tokens + 1, batch, &c).unwrap() >= base);
                prop_assert!(prefill_time(layers, tokens, batch + 1, &c).unwrap() >= base);
                let d = decode_step_time(layers, batch, &c).unwrap();
                prop_assert!(decode_step_time(layers + 1, batch, &c).unwrap() >= d);
                prop_assert!(decode_step_time(layers, batch + 1, &c).unwrap() >= d);
            }

            #[test]
            fn transfer_split_is_additive(bytes in proptest::collection::vec(0u64..1_000_000, 1..8)) {
                let bw = 7.0e6;
                let total: u64 = bytes.iter().sum();
                let whole = transfer_time(total, bw, 0.0).unwrap();
                let parts: f64 = bytes.iter().map(|b| transfer_time(*b, bw, 0.0).unwrap()).sum();
                prop_assert!((whole - parts).abs() <= 1e-9 * whole.max(1.0));
            }
        }
    }
}
