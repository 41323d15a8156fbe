//! Closed-form bubble, memory and communication estimates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::{ModelSpec, ParallelConfig};

#[derive(Debug, thiserror::Error)]
pub enum CostError {
    #[error("{method} has no closed-form row")]
    NoRow { method: Method },
    #[error("{method} needs {requirement}")]
    Constraint { method: Method, requirement: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "TP3D")]
    Tp3d,
    #[serde(rename = "GPIPE")]
    Gpipe,
    #[serde(rename = "ONE_F_ONE_B")]
    OneFOneB,
    #[serde(rename = "INTERLEAVED_1F1B")]
    Interleaved1F1B,
    #[serde(rename = "ZEROPP")]
    Zeropp,
    #[serde(rename = "ZEROPP_RECOMP")]
    ZeroppRecomp,
    #[serde(rename = "BFPP")]
    Bfpp,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Tp3d,
        Method::Gpipe,
        Method::OneFOneB,
        Method::Interleaved1F1B,
        Method::Zeropp,
        Method::ZeroppRecomp,
        Method::Bfpp,
    ];

    /// Methods with a row in the comparison table.
    pub const TABLE: [Method; 5] = [
        Method::Gpipe,
        Method::OneFOneB,
        Method::Interleaved1F1B,
        Method::Zeropp,
        Method::ZeroppRecomp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Tp3d => "TP3D",
            Method::Gpipe => "GPIPE",
            Method::OneFOneB => "ONE_F_ONE_B",
            Method::Interleaved1F1B => "INTERLEAVED_1F1B",
            Method::Zeropp => "ZEROPP",
            Method::ZeroppRecomp => "ZEROPP_RECOMP",
            Method::Bfpp => "BFPP",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let up = s.to_ascii_uppercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == up)
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub method: Method,
    /// Idle over busy time.
    pub bubble_ratio: f64,
    pub weight_mem: f64,
    pub activation_mem: f64,
    pub comm_volume_per_block: f64,
    pub crossover_satisfied: bool,
}

/// Per-block tensor-parallel traffic per iteration: `8·B·b·s·h` elements.
pub fn tp_comm_volume(model: &ModelSpec, cfg: &ParallelConfig) -> f64 {
    8.0 * cfg.microbatches as f64
        * cfg.microbatch_samples as f64
        * model.seq_len as f64
        * model.hidden_size as f64
        * model.bytes_per_element
}

/// Per-block sharded-parameter traffic per iteration: `36·B·h²/U` elements.
pub fn zeropp_comm_volume(model: &ModelSpec, cfg: &ParallelConfig) -> f64 {
    let h = model.hidden_size as f64;
    36.0 * cfg.microbatches as f64 * h * h * model.bytes_per_element / cfg.unit_size as f64
}

/// `2·s·U·b > 9·h`: sharded parameters move fewer bytes than tensor parallelism.
pub fn crossover(model: &ModelSpec, cfg: &ParallelConfig) -> bool {
    2 * model.seq_len * cfg.unit_size as u64 * cfg.microbatch_samples as u64 > 9 * model.hidden_size
}

/// Idle slots per device per iteration: 0 once a unit holds at least `2P-1`
/// micro-batches, `B(2P-1-U)/U` below that.
pub fn bubble_formula(cfg: &ParallelConfig) -> f64 {
    let threshold = 2 * cfg.pp_size - 1;
    if cfg.unit_size >= threshold {
        return 0.0;
    }
    let (b, u) = (cfg.microbatches as f64, cfg.unit_size as f64);
    b * (threshold as f64 - u) / u
}

/// `(weights, activations)` per device: the parameter shard plus one gathered
/// stage, and activations for at most one unit of micro-batches.
pub fn memory_formula(model: &ModelSpec, cfg: &ParallelConfig) -> (f64, f64) {
    let l = model.num_layers as f64;
    let (p, d, v) = (cfg.pp_size as f64, cfg.dp_size as f64, cfg.stages_per_device as f64);
    let weight = l * model.weight_mem_per_layer * (1.0 / (p * d) + 1.0 / (p * v));
    let live = cfg.microbatches.min(cfg.unit_size) as f64;
    let act = live * l * model.act_mem_per_layer_per_microbatch / p;
    (weight, act)
}

/// The comparison-table row for `method`. The ZeroPP activation rows are the
/// specialization at `U = 2P-1`.
pub fn table2_row(method: Method, model: &ModelSpec, cfg: &ParallelConfig) -> Result<CostReport, CostError> {
    let l = model.num_layers as f64;
    let (p, v, b) = (cfg.pp_size as f64, cfg.stages_per_device as f64, cfg.microbatches as f64);
    let lmw = l * model.weight_mem_per_layer;
    let lma = l * model.act_mem_per_layer_per_microbatch;
    let need_v1 = |m: Method| {
        if cfg.stages_per_device == 1 {
            Ok(())
        } else {
            Err(CostError::Constraint {
                method: m,
                requirement: format!("one stage per device (V=1), got V={}", cfg.stages_per_device),
            })
        }
    };
    let sharded_weight = memory_formula(model, cfg).0;
    let (bubble, weight, act) = match method {
        Method::Gpipe => {
            need_v1(method)?;
            ((p - 1.0) / b, lmw / p, b * lma / p)
        }
        Method::OneFOneB => {
            need_v1(method)?;
            ((p - 1.0) / b, lmw / p, lma)
        }
        Method::Interleaved1F1B => ((p - 1.0) / (v * b), lmw / p, lma * (1.0 + (p - 1.0) / (v * p))),
        Method::Zeropp => (0.0, sharded_weight, lma * (2.0 - 1.0 / p)),
        Method::ZeroppRecomp => (0.0, sharded_weight, lma * (2.0 / v - 1.0 / (v * p))),
        Method::Tp3d | Method::Bfpp => return Err(CostError::NoRow { method }),
    };
    let comm = match method {
        Method::Zeropp | Method::ZeroppRecomp => zeropp_comm_volume(model, cfg),
        _ => tp_comm_volume(model, cfg),
    };
    Ok(CostReport {
        method,
        bubble_ratio: bubble,
        weight_mem: weight,
        activation_mem: act,
        comm_volume_per_block: comm,
        crossover_satisfied: crossover(model, cfg),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Figure1Point {
    pub global_batch: usize,
    pub tp_bytes: f64,
    pub zero3_bytes: f64,
}

/// Per-GPU traffic per iteration over the whole model as the global batch
/// grows. Tensor parallelism moves activations, so it scales with the batch;
/// fully sharded data parallelism gathers parameters twice and reduce-scatters
/// gradients once, independent of the batch.
pub fn figure1_curve(model: &ModelSpec, batches: &[usize]) -> Vec<Figure1Point> {
    let l = model.num_layers as f64;
    let (s, h, bpe) = (model.seq_len as f64, model.hidden_size as f64, model.bytes_per_element);
    batches
        .iter()
        .map(|&g| Figure1Point {
            global_batch: g,
            tp_bytes: 8.0 * g as f64 * s * h * bpe * l,
            zero3_bytes: 36.0 * h * h * bpe * l,
        })
        .collect()
}

/// Smallest global batch at which sharded data parallelism moves fewer bytes
/// than tensor parallelism (`2·s·G > 9·h`).
pub fn figure1_crossover(model: &ModelSpec) -> usize {
    (9 * model.hidden_size / (2 * model.seq_len) + 1) as usize
}
