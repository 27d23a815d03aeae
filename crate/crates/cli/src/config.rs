//! Scenario files: strict TOML schema, loading with key-path diagnostics
//! and cross-field validation.

use std::fmt;
use std::path::Path;

use multipod::collectives::{Direction, ElemType, HierarchicalOptions};
use multipod::infeed::{Dataset, FileOrder};
use multipod::netsim::{BatchPlan, ComputeModel, EpochTable, LinkCostModel, ScalingScenario};
use multipod::sharding::{OptimizerSpec, Table};
use multipod::topology::{DeviceMesh, DEFAULT_DEVICES_PER_HOST};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub mesh: MeshConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collective: Option<CollectiveConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<LinkCostModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compute: Option<ComputeModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub epochs: Vec<EpochEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer_cost: Option<OptimizerCostConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tables: Option<TablesConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shuffle: Option<ShuffleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsConfig>,
}

fn default_true() -> bool {
    true
}

fn default_devices_per_host() -> usize {
    DEFAULT_DEVICES_PER_HOST
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    pub pods: usize,
    pub pod_x: usize,
    pub pod_y: usize,
    #[serde(default = "default_true")]
    pub y_torus: bool,
    #[serde(default = "default_devices_per_host")]
    pub devices_per_host: usize,
}

fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectiveConfig {
    pub payload_bytes: u64,
    #[serde(default)]
    pub elem_type: ElemType,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub y_direction: Direction,
    #[serde(default)]
    pub x_direction: Direction,
}

impl CollectiveConfig {
    pub fn payload_elems(&self) -> usize {
        (self.payload_bytes / self.elem_type.width() as u64) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub chips: Vec<usize>,
    pub global_batch: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochEntry {
    pub batch: u64,
    pub epochs: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerCostConfig {
    pub params: f64,
    pub flops_per_param: f64,
    /// Effective rate of the (memory-bound) update kernel.
    pub flops_rate: f64,
    /// Chip count at which the step fraction is reported.
    pub chips: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TablesConfig {
    pub devices: usize,
    pub capacity_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_bytes: Option<u64>,
    pub table: Vec<Table>,
}

fn default_payloads() -> Vec<usize> {
    vec![1, 7, 64, 1000]
}

fn default_instances() -> usize {
    20
}

fn default_auc_samples() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    /// Mesh for the collective and sharding suites.
    pub mesh_x: usize,
    pub mesh_y: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_payloads")]
    pub payload_elems: Vec<usize>,
    /// Randomized cases per partitioning kernel.
    #[serde(default = "default_instances")]
    pub instances: usize,
    #[serde(default = "default_auc_samples")]
    pub auc_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShuffleConfig {
    pub files: usize,
    pub examples_per_file: usize,
    pub buffer_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Monte Carlo runs drawn from the reference seed list.
    pub runs: usize,
}

impl ShuffleConfig {
    pub fn dataset(&self) -> Dataset {
        Dataset::uniform(self.files, self.examples_per_file)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    pub eval_examples: u64,
    pub devices: u64,
    pub per_device_batch: u64,
    pub auc_samples: usize,
    pub steps_per_transfer: usize,
    pub workers: usize,
    pub eval_events: usize,
}

/// Configuration problem; `key` is the dotted path of the offending entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.key.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.key, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

fn join(path: &str, field: &str) -> String {
    if path.is_empty() || path == "." {
        field.to_string()
    } else {
        format!("{path}.{field}")
    }
}

/// Parses and validates scenario text.
pub fn parse(text: &str) -> Result<Scenario, ConfigError> {
    let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::new("", format!("invalid TOML: {e}")))?;
    let scenario: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.message().to_string();
        if let Some(field) = msg.strip_prefix("missing field `").and_then(|m| m.split('`').next()) {
            let key = join(&path, field);
            ConfigError::new("", format!("missing required key: {key}"))
        } else {
            let msg = msg.lines().next().unwrap_or_default().to_string();
            ConfigError::new(if path == "." { String::new() } else { path }, msg)
        }
    })?;
    scenario.validate()?;
    Ok(scenario)
}

pub fn load(path: &Path) -> Result<(Scenario, Vec<u8>), ConfigError> {
    let bytes = std::fs::read(path).map_err(|e| ConfigError::new("", format!("cannot read {}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| ConfigError::new("", "config is not UTF-8"))?;
    Ok((parse(&text)?, bytes))
}

pub fn to_toml(scenario: &Scenario) -> String {
    toml::to_string(scenario).expect("scenario serializes")
}

fn positive(key: &str, v: usize) -> Result<(), ConfigError> {
    if v == 0 {
        return Err(ConfigError::new(key, "must be at least 1"));
    }
    Ok(())
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.mesh;
        positive("mesh.pods", m.pods)?;
        positive("mesh.pod_x", m.pod_x)?;
        positive("mesh.pod_y", m.pod_y)?;
        positive("mesh.devices_per_host", m.devices_per_host)?;
        let x_size = m.pods * m.pod_x;
        if let Some(c) = &self.collective {
            positive("collective.stride", c.stride)?;
            if !x_size.is_multiple_of(c.stride) {
                return Err(ConfigError::new(
                    "collective.stride",
                    format!("stride {} does not divide the mesh x size {x_size}", c.stride),
                ));
            }
            if c.payload_bytes % c.elem_type.width() as u64 != 0 {
                return Err(ConfigError::new(
                    "collective.payload_bytes",
                    "must be a whole number of elements",
                ));
            }
            if c.stride > 1 && !m.y_torus {
                return Err(ConfigError::new("mesh.y_torus", "the hierarchical all-reduce needs a Y torus"));
            }
        }
        if let Some(cost) = &self.cost {
            cost.validate().map_err(|e| ConfigError::new("cost", e.to_string()))?;
        }
        if let Some(c) = &self.compute {
            c.validate().map_err(|e| ConfigError::new("compute", e.to_string()))?;
        }
        if let Some(s) = &self.sweep {
            if s.chips.is_empty() {
                return Err(ConfigError::new("sweep.chips", "must list at least one chip count"));
            }
            if s.chips.contains(&0) {
                return Err(ConfigError::new("sweep.chips", "chip counts must be positive"));
            }
        }
        for (i, e) in self.epochs.iter().enumerate() {
            if self.epochs[..i].iter().any(|p| p.batch == e.batch) {
                return Err(ConfigError::new(format!("epochs[{i}].batch"), "duplicate batch size"));
            }
            positive(&format!("epochs[{i}].epochs"), e.epochs as usize)?;
        }
        if let Some(o) = &self.optimizer_cost {
            positive("optimizer_cost.chips", o.chips)?;
            if !(o.flops_rate > 0.0 && o.params >= 0.0 && o.flops_per_param >= 0.0) {
                return Err(ConfigError::new("optimizer_cost", "params and flops must be >= 0, rate > 0"));
            }
        }
        if let Some(t) = &self.tables {
            positive("tables.devices", t.devices)?;
        }
        if let Some(v) = &self.verify {
            positive("verify.mesh_x", v.mesh_x)?;
            positive("verify.mesh_y", v.mesh_y)?;
            positive("verify.stride", v.stride)?;
            if v.mesh_x % v.stride != 0 {
                return Err(ConfigError::new(
                    "verify.stride",
                    format!("stride {} does not divide verify.mesh_x {}", v.stride, v.mesh_x),
                ));
            }
            if v.auc_samples < 2 {
                return Err(ConfigError::new("verify.auc_samples", "must be at least 2"));
            }
        }
        if let Some(s) = &self.shuffle {
            positive("shuffle.files", s.files)?;
            positive("shuffle.examples_per_file", s.examples_per_file)?;
            positive("shuffle.buffer_size", s.buffer_size)?;
            positive("shuffle.epochs", s.epochs)?;
            positive("shuffle.batch_size", s.batch_size)?;
            if !(2..=multipod::infeed::REFERENCE_SEEDS.len()).contains(&s.runs) {
                return Err(ConfigError::new("shuffle.runs", "must be between 2 and 100"));
            }
        }
        if let Some(mc) = &self.metrics {
            positive("metrics.devices", mc.devices as usize)?;
            positive("metrics.per_device_batch", mc.per_device_batch as usize)?;
            positive("metrics.steps_per_transfer", mc.steps_per_transfer)?;
            positive("metrics.workers", mc.workers)?;
            if mc.auc_samples < 2 {
                return Err(ConfigError::new("metrics.auc_samples", "must be at least 2"));
            }
        }
        Ok(())
    }

    pub fn mesh(&self) -> Result<DeviceMesh, ConfigError> {
        let m = &self.mesh;
        DeviceMesh::build_multipod(m.pods, m.pod_x, m.pod_y, m.y_torus)
            .and_then(|mesh| mesh.with_devices_per_host(m.devices_per_host))
            .map_err(|e| ConfigError::new("mesh", e.to_string()))
    }

    pub fn require<'a, T>(&self, value: &'a Option<T>, key: &str) -> Result<&'a T, ConfigError> {
        value
            .as_ref()
            .ok_or_else(|| ConfigError::new("", format!("missing required key: {key}")))
    }

    pub fn epoch_table(&self) -> EpochTable {
        EpochTable::new(self.epochs.iter().map(|e| (e.batch, e.epochs)))
    }

    /// Netsim view of the scenario.
    pub fn scaling(&self) -> Result<(ScalingScenario, &SweepConfig), ConfigError> {
        let c = self.require(&self.collective, "collective")?;
        let cost = self.require(&self.cost, "cost")?;
        let compute = self.require(&self.compute, "compute")?;
        let sweep = self.require(&self.sweep, "sweep")?;
        let shard_align = self.optimizer.map_or(1, |o| o.shard_align());
        Ok((
            ScalingScenario {
                pod_x: self.mesh.pod_x,
                pod_y: self.mesh.pod_y,
                payload_elems: c.payload_elems(),
                elem_type: c.elem_type,
                stride: c.stride,
                options: HierarchicalOptions {
                    y_direction: c.y_direction,
                    x_direction: c.x_direction,
                    shard_align,
                },
                cost: *cost,
                compute: *compute,
                batch: BatchPlan::Fixed(sweep.global_batch),
                epochs: self.epoch_table(),
            },
            sweep,
        ))
    }
}

/// Name of a file order as written in configs and reports.
pub fn file_order_name(o: FileOrder) -> &'static str {
    match o {
        FileOrder::ShuffleThenRepeat => "shuffle_then_repeat",
        FileOrder::RepeatThenShuffle => "repeat_then_shuffle",
    }
}
