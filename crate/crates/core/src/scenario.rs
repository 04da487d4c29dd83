//! Scenario configuration: TOML sections, dotted overrides, validation.

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::{bundled_model, AdapterId, AdapterSpec, CheckpointLocation, ModelSpec};
use crate::cluster::{ClusterSpec, ComputeCoefficients};
use crate::engine::KvLedger;
use crate::error::{Result, SimError};
use crate::lora::{EpochConfig, LoraMode, LoraScheduling, SwitchPolicy};
use crate::planner::{default_owners, AdapterOwners, GpuId, LoadStrategy};
use crate::recovery::{CrashPhase, RecoveryMetric, RecoveryMode};
use crate::switcher::SwitchTarget;
use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Bundled model name, or `custom`. Explicit fields below override the
    /// preset's values.
    pub preset: Option<String>,
    pub model_id: Option<String>,
    pub layer_count: Option<u32>,
    pub bytes_per_layer: Option<u64>,
    pub extra_bytes: Option<u64>,
    pub checkpoint_location: Option<CheckpointLocation>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            preset: Some("mistral-7b".into()),
            model_id: None,
            layer_count: None,
            bytes_per_layer: None,
            extra_bytes: None,
            checkpoint_location: None,
        }
    }
}

impl ModelConfig {
    pub fn resolve(&self) -> Result<ModelSpec> {
        let mut spec = match self.preset.as_deref().filter(|p| *p != "custom") {
            Some(name) => bundled_model(name)
                .ok_or_else(|| SimError::config("model.preset", format!("unknown model `{name}`")))?,
            None => ModelSpec {
                model_id: self.model_id.clone().unwrap_or_else(|| "custom".into()),
                layer_count: self
                    .layer_count
                    .ok_or_else(|| SimError::config("model.layer_count", "required without a preset"))?,
                bytes_per_layer: self.bytes_per_layer.ok_or_else(|| {
                    SimError::config("model.bytes_per_layer", "required without a preset")
                })?,
                extra_bytes: 0,
                checkpoint_location: CheckpointLocation::Ssd,
            },
        };
        if let Some(id) = &self.model_id {
            spec.model_id = id.clone();
        }
        if let Some(n) = self.layer_count {
            spec.layer_count = n;
        }
        if let Some(b) = self.bytes_per_layer {
            spec.bytes_per_layer = b;
        }
        if let Some(e) = self.extra_bytes {
            spec.extra_bytes = e;
        }
        if let Some(loc) = self.checkpoint_location {
            spec.checkpoint_location = loc;
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub id: String,
    /// Must name the scenario's model when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_model: Option<String>,
    #[serde(default = "default_size_fraction")]
    pub size_fraction: f64,
    /// GPUs whose instance serves this adapter. Spread round-robin if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub owner_gpus: Option<Vec<GpuId>>,
}

fn default_size_fraction() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoadingConfig {
    pub strategy: LoadStrategy,
    /// Start with every GPU already holding the model and all adapters.
    pub warm_start: bool,
    /// Seconds of fixed runtime initialisation before parameter loading.
    pub init_meta: f64,
}

impl Default for LoadingConfig {
    fn default() -> Self {
        LoadingConfig {
            strategy: LoadStrategy::PipelineParallel,
            warm_start: false,
            init_meta: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchingConfig {
    /// Cap on requests admitted to one serving lane at a time.
    pub max_batch_size: u32,
}

impl Default for BatchingConfig {
    fn default() -> Self {
        BatchingConfig { max_batch_size: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub mode: LoraMode,
    pub scheduling: LoraScheduling,
    /// Seconds.
    pub epoch_length: f64,
    pub starvation_epochs: u32,
    /// Compute multiplier for adapter batches in unmerged mode.
    pub unmerged_overhead: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            mode: LoraMode::Merged,
            scheduling: LoraScheduling::Epoch,
            epoch_length: 0.05,
            starvation_epochs: 3,
            unmerged_overhead: 1.38,
        }
    }
}

impl LoraConfig {
    pub fn epoch_config(&self) -> EpochConfig {
        EpochConfig {
            epoch_length: SimTime::from_secs_ceil(self.epoch_length),
            switch_policy: SwitchPolicy::RoundRobinNonEmpty,
            starvation_epochs: self.starvation_epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwitchConfig {
    pub enabled: bool,
    pub target: SwitchTarget,
}

impl Default for SwitchConfig {
    fn default() -> Self {
        SwitchConfig {
            enabled: true,
            target: SwitchTarget::SingleGpu,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoveryConfig {
    pub mode: RecoveryMode,
    /// Seconds between a crash and the start of recovery.
    pub detection_latency: f64,
    pub metric: RecoveryMetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrashConfig {
    pub gpu: GpuId,
    /// Fixed crash time in seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
    /// Uniform crash time in `[start, end)` seconds, drawn from the fault stream.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<[f64; 2]>,
    #[serde(default)]
    pub phase: CrashPhase,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaultsConfig {
    /// Random crashes per second over the workload duration.
    pub poisson_rate: f64,
    pub crash: Vec<CrashConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalConfig {
    Poisson { rate: f64 },
    Burst { count: u32 },
    Trace { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LengthConfig {
    Fixed { value: u32 },
    LogNormal { mu: f64, sigma: f64 },
}

impl LengthConfig {
    fn validate(&self, field: &str) -> Result<()> {
        match self {
            LengthConfig::Fixed { .. } => Ok(()),
            LengthConfig::LogNormal { mu, sigma } => {
                if !(mu.is_finite() && sigma.is_finite() && *sigma >= 0.0) {
                    Err(SimError::config(field, "needs finite mu and non-negative sigma"))
                } else {
                    Ok(())
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    pub arrival: ArrivalConfig,
    pub prompt_length: LengthConfig,
    pub max_new_tokens: LengthConfig,
    /// Adapters requests are drawn from. Empty means every configured adapter.
    pub adapters: Vec<String>,
    /// Chance that a request uses a different adapter than the previous one.
    pub adapter_switch_probability: f64,
    /// Seconds of arrivals; the run continues until all requests finish.
    pub duration: f64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            arrival: ArrivalConfig::Burst { count: 64 },
            prompt_length: LengthConfig::Fixed { value: 64 },
            max_new_tokens: LengthConfig::Fixed { value: 32 },
            adapters: Vec::new(),
            adapter_switch_probability: 0.0,
            duration: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: "out".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub seed: u64,
    pub cluster: ClusterSpec,
    pub compute: ComputeCoefficients,
    pub model: ModelConfig,
    pub adapters: Vec<AdapterConfig>,
    pub loading: LoadingConfig,
    pub batching: BatchingConfig,
    pub lora: LoraConfig,
    pub switch: SwitchConfig,
    pub recovery: RecoveryConfig,
    pub faults: FaultsConfig,
    pub workload: WorkloadConfig,
    pub output: OutputConfig,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            seed: 1,
            cluster: ClusterSpec::default(),
            compute: ComputeCoefficients::default(),
            model: ModelConfig::default(),
            adapters: vec![AdapterConfig {
                id: "lora-a".into(),
                base_model: None,
                size_fraction: default_size_fraction(),
                owner_gpus: None,
            }],
            loading: LoadingConfig::default(),
            batching: BatchingConfig::default(),
            lora: LoraConfig::default(),
            switch: SwitchConfig::default(),
            recovery: RecoveryConfig::default(),
            faults: FaultsConfig::default(),
            workload: WorkloadConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

/// Parses a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Applies `a.b.c=value` to a TOML table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| SimError::config(assignment, "override must look like key.path=value"))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(SimError::config(path, "empty key in override path"));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| SimError::config(path, format!("`{k}` is not a table")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl Scenario {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Scenario> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| SimError::config("config", e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| SimError::config("config", e.message().to_string()))
    }

    pub fn from_path(path: &std::path::Path, overrides: &[String]) -> Result<Scenario> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        let mut scenario = Self::from_toml_str(&text, overrides)?;
        if let ArrivalConfig::Trace { path: trace } = &mut scenario.workload.arrival {
            if trace.is_relative() {
                if let Some(dir) = path.parent() {
                    *trace = dir.join(&*trace);
                }
            }
        }
        Ok(scenario)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serialises to TOML")
    }

    /// SHA-256 over the canonical JSON form; identifies a run for replay.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("scenario serialises to JSON");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        self.model.resolve()
    }

    pub fn adapter_specs(&self) -> Result<Vec<AdapterSpec>> {
        let model = self.model_spec()?;
        Ok(self
            .adapters
            .iter()
            .map(|a| AdapterSpec {
                adapter_id: AdapterId::new(a.id.clone()),
                base_model_id: model.model_id.clone(),
                size_fraction: a.size_fraction,
            })
            .collect())
    }

    pub fn adapter_ids(&self) -> Vec<AdapterId> {
        self.adapters.iter().map(|a| AdapterId::new(a.id.clone())).collect()
    }

    pub fn owners(&self) -> AdapterOwners {
        let ids = self.adapter_ids();
        let mut owners = default_owners(&ids, self.cluster.gpu_count);
        for a in &self.adapters {
            if let Some(gpus) = &a.owner_gpus {
                owners.insert(AdapterId::new(a.id.clone()), gpus.iter().copied().collect());
            }
        }
        owners
    }

    /// Adapters used by generated requests.
    pub fn workload_adapters(&self) -> Vec<AdapterId> {
        if self.workload.adapters.is_empty() {
            self.adapter_ids()
        } else {
            self.workload.adapters.iter().map(|a| AdapterId::new(a.clone())).collect()
        }
    }

    /// Checks every field and cross-field rule, returning all problems found.
    pub fn validate(&self) -> std::result::Result<(), Vec<SimError>> {
        let mut errs = Vec::new();
        let mut check = |r: Result<()>| {
            if let Err(e) = r {
                errs.push(e);
            }
        };
        check(self.cluster.validate());
        check(self.compute.validate());
        if self.cluster.gpu_count > KvLedger::MAX_GPUS {
            check(Err(SimError::config(
                "cluster.gpu_count",
                format!("at most {} GPUs are supported", KvLedger::MAX_GPUS),
            )));
        }
        let gpus = self.cluster.gpu_count;
        match self.model_spec() {
            Ok(model) => {
                check(model.validate());
                if model.layer_count < gpus {
                    check(Err(SimError::config(
                        "cluster.gpu_count",
                        format!("{gpus} GPUs cannot split {} layers", model.layer_count),
                    )));
                }
                let total_bytes = model.total_bytes()
                    + self
                        .adapters
                        .iter()
                        .map(|a| (model.total_bytes() as f64 * a.size_fraction) as u64)
                        .sum::<u64>();
                if total_bytes > self.cluster.hbm_capacity {
                    check(Err(SimError::config(
                        "cluster.hbm_capacity",
                        format!("{total_bytes} bytes of model and adapters do not fit"),
                    )));
                }
                for (i, a) in self.adapters.iter().enumerate() {
                    if let Some(base) = &a.base_model {
                        if *base != model.model_id {
                            check(Err(SimError::config(
                                format!("adapters[{i}].base_model"),
                                format!("`{base}` is not the scenario model `{}`", model.model_id),
                            )));
                        }
                    }
                }
            }
            Err(e) => check(Err(e)),
        }
        let mut seen = BTreeSet::new();
        for (i, a) in self.adapters.iter().enumerate() {
            if a.id.is_empty() || !seen.insert(a.id.clone()) {
                check(Err(SimError::config(
                    format!("adapters[{i}].id"),
                    format!("`{}` is empty or duplicated", a.id),
                )));
            }
            if !(a.size_fraction > 0.0 && a.size_fraction < 1.0) {
                check(Err(SimError::config(
                    format!("adapters[{i}].size_fraction"),
                    "must lie strictly between 0 and 1",
                )));
            }
            for &g in a.owner_gpus.iter().flatten() {
                if g >= gpus {
                    check(Err(SimError::config(
                        format!("adapters[{i}].owner_gpus"),
                        format!("GPU {g} does not exist on a {gpus}-GPU server"),
                    )));
                }
            }
        }
        for (i, name) in self.workload.adapters.iter().enumerate() {
            if !seen.contains(name) {
                check(Err(SimError::config(
                    format!("workload.adapters[{i}]"),
                    format!("unknown adapter `{name}`"),
                )));
            }
        }
        if !(self.loading.init_meta >= 0.0 && self.loading.init_meta.is_finite()) {
            check(Err(SimError::config("loading.init_meta", "must be non-negative")));
        }
        if self.batching.max_batch_size == 0 {
            check(Err(SimError::config("batching.max_batch_size", "must be at least 1")));
        }
        if !(self.lora.epoch_length > 0.0 && self.lora.epoch_length.is_finite()) {
            check(Err(SimError::config("lora.epoch_length", "must be positive")));
        }
        if !(self.lora.unmerged_overhead >= 1.0) {
            check(Err(SimError::config("lora.unmerged_overhead", "must be at least 1")));
        }
        if !(self.recovery.detection_latency >= 0.0) {
            check(Err(SimError::config("recovery.detection_latency", "must be non-negative")));
        }
        if !(self.faults.poisson_rate >= 0.0 && self.faults.poisson_rate.is_finite()) {
            check(Err(SimError::config("faults.poisson_rate", "must be non-negative")));
        }
        for (i, c) in self.faults.crash.iter().enumerate() {
            if c.gpu >= gpus {
                check(Err(SimError::config(
                    format!("faults.crash[{i}].gpu"),
                    format!("GPU {} does not exist on a {gpus}-GPU server", c.gpu),
                )));
            }
            match (c.time, c.window) {
                (Some(t), None) if t >= 0.0 => {}
                (None, Some([a, b])) if a >= 0.0 && b > a => {}
                _ => check(Err(SimError::config(
                    format!("faults.crash[{i}]"),
                    "needs either a non-negative `time` or a `window` [start, end)",
                ))),
            }
        }
        let w = &self.workload;
        match &w.arrival {
            ArrivalConfig::Poisson { rate } if !(*rate >= 0.0 && rate.is_finite()) => check(Err(
                SimError::config("workload.arrival.rate", "must be non-negative"),
            )),
            _ => {}
        }
        check(w.prompt_length.validate("workload.prompt_length"));
        check(w.max_new_tokens.validate("workload.max_new_tokens"));
        if let LengthConfig::Fixed { value: 0 } = w.prompt_length {
            check(Err(SimError::config("workload.prompt_length", "must be at least 1")));
        }
        if !(0.0..=1.0).contains(&w.adapter_switch_probability) {
            check(Err(SimError::config(
                "workload.adapter_switch_probability",
                "must lie in [0, 1]",
            )));
        }
        if !(w.duration >= 0.0 && w.duration.is_finite()) {
            check(Err(SimError::config("workload.duration", "must be non-negative")));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}
