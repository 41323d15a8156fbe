//! Domain types shared by every other module: the model being trained, the
//! parallel layout, the collective cost model, and the looping stage placement.

use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Activation constant used when `act_mem_per_layer_per_microbatch` is not given.
pub const DEFAULT_ACTIVATION_CONSTANT: f64 = 34.0;
pub const DEFAULT_OPTIMIZER_STATE_MULTIPLIER: f64 = 2.0;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

/// Transformer model description. Memories are in bytes (or abstract units),
/// times are abstract units per layer per micro-batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub num_layers: usize,
    pub hidden_size: u64,
    pub seq_len: u64,
    pub weight_mem_per_layer: f64,
    pub act_mem_per_layer_per_microbatch: f64,
    pub t_forward: f64,
    pub t_input_grad: f64,
    pub t_weight_grad: f64,
    pub t_optstep: f64,
    pub bytes_per_element: f64,
}

impl ModelSpec {
    /// A model measured in abstract units: one unit of weight and activation
    /// memory per layer, unit compute cost per layer and a free optimizer step.
    pub fn uniform(num_layers: usize) -> Self {
        Self {
            num_layers,
            hidden_size: 1,
            seq_len: 1,
            weight_mem_per_layer: 1.0,
            act_mem_per_layer_per_microbatch: 1.0,
            t_forward: 1.0,
            t_input_grad: 1.0,
            t_weight_grad: 1.0,
            t_optstep: 0.0,
            bytes_per_element: 1.0,
        }
    }

    /// Parameter bytes of one transformer block, `12 h^2` elements.
    pub fn default_weight_mem(hidden_size: u64, bytes_per_element: f64) -> f64 {
        12.0 * (hidden_size as f64) * (hidden_size as f64) * bytes_per_element
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_layers == 0 {
            return invalid("num_layers must be >= 1");
        }
        if self.hidden_size == 0 {
            return invalid("hidden_size must be >= 1");
        }
        if self.seq_len == 0 {
            return invalid("seq_len must be >= 1");
        }
        let non_negative = [
            ("weight_mem_per_layer", self.weight_mem_per_layer),
            ("act_mem_per_layer_per_microbatch", self.act_mem_per_layer_per_microbatch),
            ("t_forward", self.t_forward),
            ("t_input_grad", self.t_input_grad),
            ("t_weight_grad", self.t_weight_grad),
            ("t_optstep", self.t_optstep),
        ];
        for (name, v) in non_negative {
            if !v.is_finite() || v < 0.0 {
                return invalid(format!("{name} must be a finite value >= 0 (got {v})"));
            }
        }
        if self.bytes_per_element.is_nan() || self.bytes_per_element <= 0.0 {
            return invalid("bytes_per_element must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HybridMode {
    /// ZeRO-3 inside the node, vanilla data parallel (all-reduce) across nodes.
    #[default]
    DpOuter,
    /// ZeRO-3 inside the node, ZeRO-1 optimizer sharding across nodes.
    Zero1Outer,
}

impl fmt::Display for HybridMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HybridMode::DpOuter => "DP_OUTER",
            HybridMode::Zero1Outer => "ZERO1_OUTER",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Recompute {
    #[default]
    None,
    Full,
}

impl fmt::Display for Recompute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Recompute::None => "NONE",
            Recompute::Full => "FULL",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelConfig {
    /// Pipeline parallel size (P).
    pub pp_size: usize,
    /// Intra-node sharding group size (D).
    pub dp_size: usize,
    /// Stages mapped onto each device (V).
    pub stages_per_device: usize,
    /// Micro-batches per iteration on one pipeline (B).
    pub microbatches: usize,
    /// Micro-batches per scheduling unit (U).
    pub unit_size: usize,
    /// Samples per micro-batch (b).
    pub microbatch_samples: usize,
    /// Number of node-level replica groups.
    pub inter_node_dp: usize,
    pub hybrid_mode: HybridMode,
    pub recompute: Recompute,
    pub optimizer_state_multiplier: f64,
}

impl ParallelConfig {
    /// Single-node config with the given pipeline shape and defaults elsewhere.
    pub fn new(pp_size: usize, stages_per_device: usize, microbatches: usize, unit_size: usize) -> Self {
        Self {
            pp_size,
            dp_size: 1,
            stages_per_device,
            microbatches,
            unit_size,
            microbatch_samples: 1,
            inter_node_dp: 1,
            hybrid_mode: HybridMode::DpOuter,
            recompute: Recompute::None,
            optimizer_state_multiplier: DEFAULT_OPTIMIZER_STATE_MULTIPLIER,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.pp_size * self.stages_per_device
    }

    pub fn num_units(&self) -> usize {
        self.microbatches / self.unit_size
    }

    pub fn validate(&self, model: &ModelSpec) -> Result<(), ConfigError> {
        let positive = [
            ("pp_size", self.pp_size),
            ("dp_size", self.dp_size),
            ("stages_per_device", self.stages_per_device),
            ("microbatches", self.microbatches),
            ("unit_size", self.unit_size),
            ("microbatch_samples", self.microbatch_samples),
            ("inter_node_dp", self.inter_node_dp),
        ];
        for (name, v) in positive {
            if v == 0 {
                return invalid(format!("{name} must be >= 1"));
            }
        }
        if self.unit_size > self.microbatches {
            return invalid(format!(
                "unit_size U={} exceeds microbatches B={}",
                self.unit_size, self.microbatches
            ));
        }
        if !self.microbatches.is_multiple_of(self.unit_size) {
            return invalid(format!(
                "B mod U ≠ 0 (B={}, U={})",
                self.microbatches, self.unit_size
            ));
        }
        if !model.num_layers.is_multiple_of(self.num_stages()) {
            return invalid(format!(
                "L mod (P·V) ≠ 0 (L={}, P={}, V={})",
                model.num_layers, self.pp_size, self.stages_per_device
            ));
        }
        if !self.optimizer_state_multiplier.is_finite() || self.optimizer_state_multiplier < 0.0 {
            return invalid("optimizer_state_multiplier must be a finite value >= 0");
        }
        Ok(())
    }
}

/// Two-tier collective cost model. Bandwidths are bytes per time unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommCostModel {
    pub intra_node_bandwidth: f64,
    pub inter_node_bandwidth: f64,
    pub per_collective_latency: f64,
    pub overlap_with_compute: bool,
}

impl CommCostModel {
    /// Infinitely fast collectives: every collective takes zero time.
    pub fn free() -> Self {
        Self {
            intra_node_bandwidth: f64::INFINITY,
            inter_node_bandwidth: f64::INFINITY,
            per_collective_latency: 0.0,
            overlap_with_compute: true,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if [self.intra_node_bandwidth, self.inter_node_bandwidth]
            .iter()
            .any(|b| b.is_nan() || *b <= 0.0)
        {
            return invalid("bandwidths must be > 0");
        }
        if self.per_collective_latency.is_nan() || self.per_collective_latency < 0.0 {
            return invalid("per_collective_latency must be >= 0");
        }
        Ok(())
    }
}

impl Default for CommCostModel {
    fn default() -> Self {
        Self::free()
    }
}

/// A validated configuration file: model, parallel layout and collective costs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Config {
    pub model: ModelSpec,
    pub parallel: ParallelConfig,
    pub costs: CommCostModel,
}

// On-disk shapes. Optional fields get defaults during resolution.

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: RawModel,
    parallel: RawParallel,
    #[serde(default)]
    costs: Option<RawCosts>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    num_layers: usize,
    hidden_size: u64,
    seq_len: u64,
    weight_mem_per_layer: Option<f64>,
    act_mem_per_layer_per_microbatch: Option<f64>,
    activation_constant: Option<f64>,
    #[serde(default = "one")]
    t_forward: f64,
    #[serde(default = "one")]
    t_input_grad: f64,
    #[serde(default = "one")]
    t_weight_grad: f64,
    #[serde(default)]
    t_optstep: f64,
    #[serde(default = "two")]
    bytes_per_element: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParallel {
    pp_size: usize,
    #[serde(default = "one_usize")]
    dp_size: usize,
    #[serde(default = "one_usize")]
    stages_per_device: usize,
    microbatches: usize,
    unit_size: Option<usize>,
    #[serde(default = "one_usize")]
    microbatch_samples: usize,
    #[serde(default = "one_usize")]
    inter_node_dp: usize,
    #[serde(default)]
    hybrid_mode: HybridMode,
    #[serde(default)]
    recompute: Recompute,
    #[serde(default = "default_k")]
    optimizer_state_multiplier: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCosts {
    intra_node_bandwidth: f64,
    inter_node_bandwidth: f64,
    #[serde(default)]
    per_collective_latency: f64,
    #[serde(default = "yes")]
    overlap_with_compute: bool,
}

fn one() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}
fn one_usize() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_k() -> f64 {
    DEFAULT_OPTIMIZER_STATE_MULTIPLIER
}

impl Config {
    pub fn new(model: ModelSpec, parallel: ParallelConfig, costs: CommCostModel) -> Result<Self, ConfigError> {
        let cfg = Self { model, parallel, costs };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.parallel.validate(&self.model)?;
        self.costs.validate()
    }

    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = serde_json::from_str(text)?;
        let bpe = raw.model.bytes_per_element;
        let samples = raw.parallel.microbatch_samples;
        let model = ModelSpec {
            num_layers: raw.model.num_layers,
            hidden_size: raw.model.hidden_size,
            seq_len: raw.model.seq_len,
            weight_mem_per_layer: raw
                .model
                .weight_mem_per_layer
                .unwrap_or_else(|| ModelSpec::default_weight_mem(raw.model.hidden_size, bpe)),
            act_mem_per_layer_per_microbatch: raw.model.act_mem_per_layer_per_microbatch.unwrap_or_else(|| {
                let c = raw.model.activation_constant.unwrap_or(DEFAULT_ACTIVATION_CONSTANT);
                (raw.model.seq_len as f64) * (samples as f64) * (raw.model.hidden_size as f64) * bpe * c
            }),
            t_forward: raw.model.t_forward,
            t_input_grad: raw.model.t_input_grad,
            t_weight_grad: raw.model.t_weight_grad,
            t_optstep: raw.model.t_optstep,
            bytes_per_element: bpe,
        };
        let p = raw.parallel;
        let parallel = ParallelConfig {
            pp_size: p.pp_size,
            dp_size: p.dp_size,
            stages_per_device: p.stages_per_device,
            microbatches: p.microbatches,
            unit_size: p.unit_size.unwrap_or(p.microbatches),
            microbatch_samples: p.microbatch_samples,
            inter_node_dp: p.inter_node_dp,
            hybrid_mode: p.hybrid_mode,
            recompute: p.recompute,
            optimizer_state_multiplier: p.optimizer_state_multiplier,
        };
        let costs = match raw.costs {
            Some(c) => CommCostModel {
                intra_node_bandwidth: c.intra_node_bandwidth,
                inter_node_bandwidth: c.inter_node_bandwidth,
                per_collective_latency: c.per_collective_latency,
                overlap_with_compute: c.overlap_with_compute,
            },
            None => CommCostModel::free(),
        };
        Self::new(model, parallel, costs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    /// Compact JSON that [`Config::from_json_str`] reads back unchanged.
    ///
    /// Infinite bandwidths have no JSON form and are written as `1e300`.
    pub fn to_json(&self) -> String {
        let mut cfg = self.clone();
        for bw in [&mut cfg.costs.intra_node_bandwidth, &mut cfg.costs.inter_node_bandwidth] {
            if bw.is_infinite() {
                *bw = 1e300;
            }
        }
        serde_json::to_string(&cfg).expect("config serializes")
    }

    pub fn placement(&self) -> Placement {
        make_placement(&self.parallel, &self.model)
    }
}

/// `load_config` as a free function returning the three parts.
pub fn load_config(path: impl AsRef<Path>) -> Result<(ModelSpec, ParallelConfig, CommCostModel), ConfigError> {
    let cfg = Config::load(path)?;
    Ok((cfg.model, cfg.parallel, cfg.costs))
}

/// Looping placement of `P·V` equal stages onto `P` devices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub num_devices: usize,
    pub stages_per_device: usize,
    pub stage_to_device: Vec<usize>,
    pub stage_to_layers: Vec<Range<usize>>,
}

/// Stage `i` goes to device `i mod P`; layers are split contiguously.
pub fn make_placement(cfg: &ParallelConfig, model: &ModelSpec) -> Placement {
    let num_stages = cfg.num_stages();
    let per_stage = model.num_layers / num_stages;
    Placement {
        num_devices: cfg.pp_size,
        stages_per_device: cfg.stages_per_device,
        stage_to_device: (0..num_stages).map(|s| s % cfg.pp_size).collect(),
        stage_to_layers: (0..num_stages).map(|s| s * per_stage..(s + 1) * per_stage).collect(),
    }
}

impl Placement {
    pub fn num_stages(&self) -> usize {
        self.stage_to_device.len()
    }

    pub fn device_of(&self, stage: usize) -> usize {
        self.stage_to_device[stage]
    }

    /// Position of the stage among its device's stages (0 = first mapped).
    pub fn round_of(&self, stage: usize) -> usize {
        stage / self.num_devices
    }

    pub fn stage_at(&self, device: usize, round: usize) -> usize {
        round * self.num_devices + device
    }

    pub fn stages_on(&self, device: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.stages_per_device).map(move |r| self.stage_at(device, r))
    }

    pub fn last_stage_of(&self, device: usize) -> usize {
        self.stage_at(device, self.stages_per_device - 1)
    }

    pub fn is_last_mapped(&self, stage: usize) -> bool {
        self.round_of(stage) + 1 == self.stages_per_device
    }

    pub fn layers_in(&self, stage: usize) -> usize {
        self.stage_to_layers[stage].len()
    }

    pub fn layers_on_device(&self, device: usize) -> usize {
        self.stages_on(device).map(|s| self.layers_in(s)).sum()
    }
}
