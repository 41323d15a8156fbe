//! Pipeline schedules: per-device ordered task lists over a dependency DAG.
//!
//! Every variant is produced in two steps. A variant-specific generator decides
//! the order of compute tasks (F/B/W) on each device; [`assemble`] then inserts
//! the collectives and the optimizer step and derives the edge set.

mod assemble;
mod baseline;
mod recompute;
mod text;
mod zeropp;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::{ModelSpec, ParallelConfig, Placement};

pub use assemble::{buffer_plan, build_dependency_edges, identity_edges, BufferPlan, DepEdge, ParamBuffer};
pub use baseline::{gen_baseline, gen_bfpp};
pub use recompute::apply_recompute;
pub use text::TextHeader;
pub use zeropp::gen_zeropp;

pub type TaskId = usize;

#[derive(Debug, thiserror::Error)]
pub enum ScheduleError {
    #[error("{variant} cannot be generated for this config: {reason}")]
    VariantMismatch { variant: Variant, reason: String },
    #[error("schedule parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Config(#[from] crate::model::ConfigError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    F,
    B,
    W,
    R,
    #[serde(rename = "AG_PARAM")]
    AgParam,
    #[serde(rename = "RS_GRAD")]
    RsGrad,
    #[serde(rename = "AR_GRAD")]
    ArGrad,
    #[serde(rename = "AG_PARAM_INTER")]
    AgParamInter,
    #[serde(rename = "RS_GRAD_INTER")]
    RsGradInter,
    #[serde(rename = "OPT")]
    Opt,
}

impl TaskKind {
    pub const ALL: [TaskKind; 10] = [
        TaskKind::F,
        TaskKind::B,
        TaskKind::W,
        TaskKind::R,
        TaskKind::AgParam,
        TaskKind::RsGrad,
        TaskKind::ArGrad,
        TaskKind::AgParamInter,
        TaskKind::RsGradInter,
        TaskKind::Opt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::F => "F",
            TaskKind::B => "B",
            TaskKind::W => "W",
            TaskKind::R => "R",
            TaskKind::AgParam => "AG_PARAM",
            TaskKind::RsGrad => "RS_GRAD",
            TaskKind::ArGrad => "AR_GRAD",
            TaskKind::AgParamInter => "AG_PARAM_INTER",
            TaskKind::RsGradInter => "RS_GRAD_INTER",
            TaskKind::Opt => "OPT",
        }
    }

    /// Runs on the compute stream.
    pub fn is_compute(self) -> bool {
        matches!(self, TaskKind::F | TaskKind::B | TaskKind::W | TaskKind::R | TaskKind::Opt)
    }

    /// A per-(stage, micro-batch) pipeline task.
    pub fn is_pipeline(self) -> bool {
        matches!(self, TaskKind::F | TaskKind::B | TaskKind::W | TaskKind::R)
    }

    pub fn is_collective(self) -> bool {
        !self.is_compute()
    }

    /// Collectives that cross node boundaries.
    pub fn is_inter_node(self) -> bool {
        matches!(self, TaskKind::ArGrad | TaskKind::AgParamInter | TaskKind::RsGradInter)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown task kind {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "ZEROPP")]
    Zeropp,
    #[serde(rename = "BFPP")]
    Bfpp,
    #[serde(rename = "GPIPE")]
    Gpipe,
    #[serde(rename = "ONE_F_ONE_B")]
    OneFOneB,
    #[serde(rename = "INTERLEAVED_1F1B")]
    Interleaved1F1B,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Zeropp,
        Variant::Bfpp,
        Variant::Gpipe,
        Variant::OneFOneB,
        Variant::Interleaved1F1B,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Zeropp => "ZEROPP",
            Variant::Bfpp => "BFPP",
            Variant::Gpipe => "GPIPE",
            Variant::OneFOneB => "ONE_F_ONE_B",
            Variant::Interleaved1F1B => "INTERLEAVED_1F1B",
        }
    }

    /// Input and weight gradients are separate tasks.
    pub fn decouples_weight_grad(self) -> bool {
        self == Variant::Zeropp
    }

    /// Parameters are sharded and gathered per stage.
    pub fn is_sharded(self) -> bool {
        matches!(self, Variant::Zeropp | Variant::Bfpp)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace(['-', '_'], "");
        Ok(match norm.as_str() {
            "zeropp" => Variant::Zeropp,
            "bfpp" => Variant::Bfpp,
            "gpipe" => Variant::Gpipe,
            "1f1b" | "onefoneb" => Variant::OneFOneB,
            "interleaved" | "interleaved1f1b" => Variant::Interleaved1F1B,
            _ => return Err(format!("unknown variant {s:?}")),
        })
    }
}

/// Identity of a task, independent of where it sits in a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskKey {
    pub kind: TaskKind,
    pub stage: Option<usize>,
    pub microbatch: Option<usize>,
    pub unit: usize,
    pub device: usize,
    /// Distinguishes repeated collectives with otherwise equal fields
    /// (the forward and backward parameter gathers of a stage).
    pub occurrence: u8,
}

impl fmt::Display for TaskKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)?;
        match (self.stage, self.microbatch) {
            (Some(s), Some(m)) => write!(f, "(s{s},mb{m})"),
            (Some(s), None) => write!(f, "(s{s},u{},#{})", self.unit, self.occurrence),
            _ => write!(f, "(dev{})", self.device),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub kind: TaskKind,
    pub stage: Option<usize>,
    pub microbatch: Option<usize>,
    pub unit: usize,
    pub device: usize,
    #[serde(default)]
    pub occurrence: u8,
    /// Compute duration; collectives carry 0 here and are timed from `bytes`.
    pub cost: f64,
    /// Bytes this device moves for a collective; 0 for compute tasks.
    pub bytes: f64,
}

impl Task {
    pub fn key(&self) -> TaskKey {
        TaskKey {
            kind: self.kind,
            stage: self.stage,
            microbatch: self.microbatch,
            unit: self.unit,
            device: self.device,
            occurrence: self.occurrence,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@dev{}", self.key(), self.device)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub variant: Variant,
    /// Micro-batches per scheduling unit (equal to B for variants without units).
    pub unit_size: usize,
    pub tasks: Vec<Task>,
    pub per_device: Vec<Vec<TaskId>>,
    /// `(before, after)` pairs.
    pub edges: Vec<(TaskId, TaskId)>,
}

impl Schedule {
    pub fn num_devices(&self) -> usize {
        self.per_device.len()
    }

    pub fn device_tasks(&self, device: usize) -> impl Iterator<Item = &Task> + '_ {
        self.per_device[device].iter().map(move |&id| &self.tasks[id])
    }

    pub fn count(&self, kind: TaskKind) -> usize {
        self.tasks.iter().filter(|t| t.kind == kind).count()
    }

    pub fn index(&self) -> HashMap<TaskKey, TaskId> {
        let mut map = HashMap::with_capacity(self.tasks.len());
        for (id, t) in self.tasks.iter().enumerate() {
            map.entry(t.key()).or_insert(id);
        }
        map
    }

    /// Looks up a pipeline task by `(kind, stage, micro-batch)`.
    pub fn find(&self, kind: TaskKind, stage: usize, microbatch: usize) -> Option<TaskId> {
        self.tasks
            .iter()
            .position(|t| t.kind == kind && t.stage == Some(stage) && t.microbatch == Some(microbatch))
    }

    /// Compute-task order of one device as `(kind, stage, micro-batch)`, OPT excluded.
    pub fn compute_order(&self, device: usize) -> Vec<(TaskKind, usize, usize)> {
        self.device_tasks(device)
            .filter(|t| t.kind.is_pipeline())
            .map(|t| (t.kind, t.stage.unwrap_or(0), t.microbatch.unwrap_or(0)))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ScheduleError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Generates the schedule for any variant.
pub fn generate(
    variant: Variant,
    model: &ModelSpec,
    cfg: &ParallelConfig,
    placement: &Placement,
) -> Result<Schedule, ScheduleError> {
    match variant {
        Variant::Zeropp => Ok(gen_zeropp(model, cfg, placement)),
        Variant::Bfpp => Ok(gen_bfpp(model, cfg, placement)),
        v => gen_baseline(v, model, cfg, placement),
    }
}
