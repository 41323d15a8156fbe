use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Schedule, Task, TaskId, TaskKey, TaskKind, Variant};
use crate::comm::{all_reduce_bytes, scatter_gather_bytes};
use crate::model::{HybridMode, ModelSpec, ParallelConfig, Placement, Recompute};

/// Builds tasks with their costs and collective sizes for one configuration.
pub(crate) struct TaskFactory<'a> {
    pub model: &'a ModelSpec,
    pub cfg: &'a ParallelConfig,
    pub placement: &'a Placement,
    pub variant: Variant,
}

impl TaskFactory<'_> {
    pub fn unit_size(&self) -> usize {
        if self.variant == Variant::Zeropp {
            self.cfg.unit_size
        } else {
            self.cfg.microbatches
        }
    }

    pub fn compute(&self, kind: TaskKind, stage: usize, microbatch: usize) -> Task {
        let layers = self.placement.layers_in(stage) as f64;
        let m = self.model;
        let per_layer = match kind {
            TaskKind::F | TaskKind::R => m.t_forward,
            TaskKind::B if self.variant.decouples_weight_grad() => m.t_input_grad,
            TaskKind::B => m.t_input_grad + m.t_weight_grad,
            TaskKind::W => m.t_weight_grad,
            other => unreachable!("{other} is not a pipeline task"),
        };
        Task {
            kind,
            stage: Some(stage),
            microbatch: Some(microbatch),
            unit: microbatch / self.unit_size(),
            device: self.placement.device_of(stage),
            occurrence: 0,
            cost: per_layer * layers,
            bytes: 0.0,
        }
    }

    fn stage_param_bytes(&self, stage: usize) -> f64 {
        self.model.weight_mem_per_layer * self.placement.layers_in(stage) as f64
    }

    /// Intra-node parameter gather (`AG_PARAM`) or gradient reduce-scatter (`RS_GRAD`).
    pub fn stage_collective(&self, kind: TaskKind, stage: usize, unit: usize, occurrence: u8) -> Task {
        Task {
            kind,
            stage: Some(stage),
            microbatch: None,
            unit,
            device: self.placement.device_of(stage),
            occurrence,
            cost: 0.0,
            bytes: scatter_gather_bytes(self.cfg.dp_size, self.stage_param_bytes(stage)),
        }
    }

    /// Inter-node collectives and the optimizer step, one per device.
    pub fn device_task(&self, kind: TaskKind, device: usize) -> Task {
        let layers = self.placement.layers_on_device(device) as f64;
        let shard = self.model.weight_mem_per_layer * layers / self.cfg.dp_size as f64;
        let replicas = self.cfg.inter_node_dp;
        let (cost, bytes) = match kind {
            TaskKind::Opt => (self.model.t_optstep * layers, 0.0),
            TaskKind::ArGrad => (0.0, all_reduce_bytes(replicas, shard)),
            TaskKind::RsGradInter | TaskKind::AgParamInter => (0.0, scatter_gather_bytes(replicas, shard)),
            other => unreachable!("{other} is not a device-level task"),
        };
        Task {
            kind,
            stage: None,
            microbatch: None,
            unit: self.cfg.num_units_for(self.unit_size()) - 1,
            device,
            occurrence: 0,
            cost,
            bytes,
        }
    }
}

impl ParallelConfig {
    pub(crate) fn num_units_for(&self, unit_size: usize) -> usize {
        self.microbatches.div_ceil(unit_size)
    }
}

/// Turns per-device compute orders into a complete schedule: inserts the
/// parameter gathers, gradient reduce-scatters, inter-node collectives and the
/// optimizer step, then derives the edge set.
pub(crate) fn assemble(factory: &TaskFactory<'_>, compute_orders: Vec<Vec<(TaskKind, usize, usize)>>) -> Schedule {
    let unit_size = factory.unit_size();
    let sharded = factory.variant.is_sharded();
    let mut tasks: Vec<Task> = Vec::new();
    let mut per_device = Vec::with_capacity(compute_orders.len());

    for (device, order) in compute_orders.into_iter().enumerate() {
        let mut ids = Vec::with_capacity(order.len() * 2);
        let mut push = |task: Task, ids: &mut Vec<TaskId>| {
            ids.push(tasks.len());
            tasks.push(task);
        };
        // The reduce-scatter of (stage, unit) goes right after its last gradient task.
        let grad_kind = if factory.variant.decouples_weight_grad() { TaskKind::W } else { TaskKind::B };
        let mut last_grad: HashMap<(usize, usize), usize> = HashMap::new();
        for (pos, &(kind, s, m)) in order.iter().enumerate() {
            if kind == grad_kind {
                last_grad.insert((s, m / unit_size), pos);
            }
        }
        let mut forward_gathered = std::collections::HashSet::new();
        let mut backward_gathered = std::collections::HashSet::new();
        for (pos, &(kind, s, m)) in order.iter().enumerate() {
            let u = m / unit_size;
            if sharded {
                if kind == TaskKind::F && forward_gathered.insert((s, u)) {
                    push(factory.stage_collective(TaskKind::AgParam, s, u, 0), &mut ids);
                }
                if matches!(kind, TaskKind::B | TaskKind::R) && backward_gathered.insert((s, u)) {
                    push(factory.stage_collective(TaskKind::AgParam, s, u, 1), &mut ids);
                }
            }
            push(factory.compute(kind, s, m), &mut ids);
            if sharded && last_grad.get(&(s, u)) == Some(&pos) {
                push(factory.stage_collective(TaskKind::RsGrad, s, u, 0), &mut ids);
            }
        }
        if sharded {
            match factory.cfg.hybrid_mode {
                HybridMode::DpOuter => {
                    push(factory.device_task(TaskKind::ArGrad, device), &mut ids);
                    push(factory.device_task(TaskKind::Opt, device), &mut ids);
                }
                HybridMode::Zero1Outer => {
                    push(factory.device_task(TaskKind::RsGradInter, device), &mut ids);
                    push(factory.device_task(TaskKind::Opt, device), &mut ids);
                    push(factory.device_task(TaskKind::AgParamInter, device), &mut ids);
                }
            }
        } else {
            push(factory.device_task(TaskKind::Opt, device), &mut ids);
        }
        per_device.push(ids);
    }

    let mut sched = Schedule {
        variant: factory.variant,
        unit_size,
        tasks,
        per_device,
        edges: Vec::new(),
    };
    sched.edges = derive_edges(&sched, factory.placement.num_stages());
    sched
}

/// Identity edges plus the buffer-reuse edges implied by the current order.
pub(crate) fn derive_edges(sched: &Schedule, num_stages: usize) -> Vec<(TaskId, TaskId)> {
    let mut edges = identity_edges(&sched.tasks, num_stages, sched.unit_size);
    edges.extend(buffer_plan(sched).reuse_edges(sched));
    edges.sort_unstable();
    edges.dedup();
    edges
}

/// Edges that follow from task identities alone, independent of any order:
/// data dependencies between pipeline tasks, gathers before their users,
/// reduce-scatters after the gradients they reduce, optimizer after all
/// gradient synchronization.
pub fn identity_edges(tasks: &[Task], num_stages: usize, unit_size: usize) -> Vec<(TaskId, TaskId)> {
    let unit_size = unit_size.max(1);
    let mut pipeline: HashMap<(TaskKind, usize, usize), TaskId> = HashMap::new();
    let mut gathers: HashMap<(usize, usize, u8), TaskId> = HashMap::new();
    let mut reduces: HashMap<(usize, usize), TaskId> = HashMap::new();
    let mut device_level: HashMap<(TaskKind, usize), TaskId> = HashMap::new();
    let mut rs_by_device: HashMap<usize, Vec<TaskId>> = HashMap::new();
    let mut grads_by_device: HashMap<usize, Vec<TaskId>> = HashMap::new();

    for (id, t) in tasks.iter().enumerate() {
        match (t.kind, t.stage, t.microbatch) {
            (k, Some(s), Some(m)) if k.is_pipeline() => {
                pipeline.entry((k, s, m)).or_insert(id);
                if matches!(k, TaskKind::B | TaskKind::W) {
                    grads_by_device.entry(t.device).or_default().push(id);
                }
            }
            (TaskKind::AgParam, Some(s), _) => {
                gathers.entry((s, t.unit, t.occurrence)).or_insert(id);
            }
            (TaskKind::RsGrad, Some(s), _) => {
                reduces.entry((s, t.unit)).or_insert(id);
                rs_by_device.entry(t.device).or_default().push(id);
            }
            (k, _, _) if !k.is_pipeline() => {
                device_level.entry((k, t.device)).or_insert(id);
            }
            _ => {}
        }
    }

    let mut edges = Vec::new();
    let mut add = |from: Option<TaskId>, to: TaskId| {
        if let Some(from) = from {
            if from != to {
                edges.push((from, to));
            }
        }
    };
    let get = |k: TaskKind, s: usize, m: usize| pipeline.get(&(k, s, m)).copied();

    for (id, t) in tasks.iter().enumerate() {
        match (t.kind, t.stage, t.microbatch) {
            (TaskKind::F, Some(s), Some(m)) => {
                if s > 0 {
                    add(get(TaskKind::F, s - 1, m), id);
                }
                add(gathers.get(&(s, m / unit_size, 0)).copied(), id);
            }
            (TaskKind::R, Some(s), Some(m)) => {
                add(get(TaskKind::F, s, m), id);
                add(gathers.get(&(s, m / unit_size, 1)).copied(), id);
            }
            (kind @ (TaskKind::B | TaskKind::W), Some(s), Some(m)) => {
                if s + 1 < num_stages {
                    add(get(TaskKind::B, s + 1, m), id);
                } else {
                    add(get(TaskKind::F, s, m), id);
                }
                add(get(TaskKind::R, s, m), id);
                if kind == TaskKind::B {
                    add(gathers.get(&(s, m / unit_size, 1)).copied(), id);
                }
            }
            (TaskKind::AgParam, Some(s), _) if t.occurrence > 0 => {
                add(gathers.get(&(s, t.unit, t.occurrence - 1)).copied(), id);
            }
            (TaskKind::RsGrad, Some(s), _) => {
                for m in t.unit * unit_size..(t.unit + 1) * unit_size {
                    add(get(TaskKind::W, s, m).or_else(|| get(TaskKind::B, s, m)), id);
                }
            }
            (TaskKind::ArGrad | TaskKind::RsGradInter, _, _) => {
                for &rs in rs_by_device.get(&t.device).into_iter().flatten() {
                    add(Some(rs), id);
                }
            }
            (TaskKind::Opt, _, _) => {
                add(device_level.get(&(TaskKind::ArGrad, t.device)).copied(), id);
                add(device_level.get(&(TaskKind::RsGradInter, t.device)).copied(), id);
                match rs_by_device.get(&t.device) {
                    Some(rs) => rs.iter().for_each(|&r| add(Some(r), id)),
                    None => {
                        for &g in grads_by_device.get(&t.device).into_iter().flatten() {
                            add(Some(g), id);
                        }
                    }
                }
            }
            (TaskKind::AgParamInter, _, _) => {
                add(device_level.get(&(TaskKind::Opt, t.device)).copied(), id);
            }
            _ => {}
        }
    }
    edges
}

/// A gathered copy of one stage's parameters, alive from its first gather
/// until the last task that reads the parameters completes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBuffer {
    pub device: usize,
    pub stage: usize,
    pub unit: usize,
    pub gathers: Vec<TaskId>,
    /// F, B and R tasks that read the parameters, in device order.
    pub users: Vec<TaskId>,
}

#[derive(Debug, Clone, Default)]
pub struct BufferPlan {
    pub buffers: Vec<ParamBuffer>,
    pub task_buffer: Vec<Option<usize>>,
}

impl BufferPlan {
    /// Each newly opened buffer waits for the previous buffer on the same
    /// device to be released, so a device holds at most one gathered stage.
    fn reuse_edges(&self, sched: &Schedule) -> Vec<(TaskId, TaskId)> {
        let mut edges = Vec::new();
        let mut prev_on_device: Vec<Option<usize>> = vec![None; sched.num_devices()];
        for (idx, buf) in self.buffers.iter().enumerate() {
            if let Some(prev) = prev_on_device[buf.device] {
                let p = &self.buffers[prev];
                let release = p.users.last().or(p.gathers.last()).copied();
                if let (Some(from), Some(&to)) = (release, buf.gathers.first()) {
                    edges.push((from, to));
                }
            }
            prev_on_device[buf.device] = Some(idx);
        }
        edges
    }
}

/// Assigns parameter gathers and their readers to buffers by walking each
/// device's order. A gather for the stage/unit already open refreshes it in
/// place; any other gather closes the open buffer and opens a new one.
pub fn buffer_plan(sched: &Schedule) -> BufferPlan {
    let mut plan = BufferPlan {
        buffers: Vec::new(),
        task_buffer: vec![None; sched.tasks.len()],
    };
    for (device, ids) in sched.per_device.iter().enumerate() {
        let mut open: Option<usize> = None;
        for &id in ids {
            let t = &sched.tasks[id];
            let Some(stage) = t.stage else { continue };
            let unit = t.unit;
            let matches_open = |open: Option<usize>, plan: &BufferPlan| {
                open.filter(|&b| plan.buffers[b].stage == stage && plan.buffers[b].unit == unit)
            };
            match t.kind {
                TaskKind::AgParam => {
                    let b = match matches_open(open, &plan) {
                        Some(b) => b,
                        None => {
                            plan.buffers.push(ParamBuffer {
                                device,
                                stage,
                                unit,
                                gathers: Vec::new(),
                                users: Vec::new(),
                            });
                            plan.buffers.len() - 1
                        }
                    };
                    plan.buffers[b].gathers.push(id);
                    plan.task_buffer[id] = Some(b);
                    open = Some(b);
                }
                TaskKind::F | TaskKind::B | TaskKind::R => {
                    if let Some(b) = matches_open(open, &plan) {
                        plan.buffers[b].users.push(id);
                        plan.task_buffer[id] = Some(b);
                    }
                }
                _ => {}
            }
        }
    }
    plan
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DepEdge {
    pub before: TaskKey,
    pub after: TaskKey,
}

/// The canonical dependency DAG of a decoupled (F/B/W) sharded schedule for
/// this configuration, with recomputation and collectives, keyed by identity.
pub fn build_dependency_edges(placement: &Placement, cfg: &ParallelConfig) -> Vec<DepEdge> {
    let stages = placement.num_stages();
    let unit_size = cfg.unit_size;
    let mut tasks = Vec::new();
    let mut mk = |kind, stage: Option<usize>, microbatch: Option<usize>, unit, device, occurrence| {
        tasks.push(Task {
            kind,
            stage,
            microbatch,
            unit,
            device,
            occurrence,
            cost: 0.0,
            bytes: 0.0,
        })
    };
    let recompute = cfg.recompute == Recompute::Full && cfg.stages_per_device > 1;
    for s in 0..stages {
        let d = placement.device_of(s);
        for m in 0..cfg.microbatches {
            let u = m / unit_size;
            mk(TaskKind::F, Some(s), Some(m), u, d, 0);
            mk(TaskKind::B, Some(s), Some(m), u, d, 0);
            mk(TaskKind::W, Some(s), Some(m), u, d, 0);
            if recompute && !placement.is_last_mapped(s) {
                mk(TaskKind::R, Some(s), Some(m), u, d, 0);
            }
        }
        for u in 0..cfg.num_units() {
            mk(TaskKind::AgParam, Some(s), None, u, d, 0);
            mk(TaskKind::AgParam, Some(s), None, u, d, 1);
            mk(TaskKind::RsGrad, Some(s), None, u, d, 0);
        }
    }
    let last_unit = cfg.num_units() - 1;
    for d in 0..cfg.pp_size {
        match cfg.hybrid_mode {
            HybridMode::DpOuter => {
                mk(TaskKind::ArGrad, None, None, last_unit, d, 0);
                mk(TaskKind::Opt, None, None, last_unit, d, 0);
            }
            HybridMode::Zero1Outer => {
                mk(TaskKind::RsGradInter, None, None, last_unit, d, 0);
                mk(TaskKind::Opt, None, None, last_unit, d, 0);
                mk(TaskKind::AgParamInter, None, None, last_unit, d, 0);
            }
        }
    }
    let mut edges: Vec<DepEdge> = identity_edges(&tasks, stages, unit_size)
        .into_iter()
        .map(|(a, b)| DepEdge {
            before: tasks[a].key(),
            after: tasks[b].key(),
        })
        .collect();
    edges.sort();
    edges.dedup();
    edges
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_placement, ModelSpec};

    fn key(kind: TaskKind, s: usize, m: usize, unit_size: usize, p: usize) -> TaskKey {
        TaskKey {
            kind,
            stage: Some(s),
            microbatch: Some(m),
            unit: m / unit_size,
            device: s % p,
            occurrence: 0,
        }
    }

    fn has(edges: &[DepEdge], before: TaskKey, after: TaskKey) -> bool {
        edges.iter().any(|e| e.before == before && e.after == after)
    }

    #[test]
    fn two_stage_decoupled_edges() {
        let cfg = ParallelConfig::new(2, 1, 1, 1);
        let pl = make_placement(&cfg, &ModelSpec::uniform(2));
        let edges = build_dependency_edges(&pl, &cfg);
        let k = |kind, s| key(kind, s, 0, 1, 2);
        assert!(has(&edges, k(TaskKind::F, 0), k(TaskKind::F, 1)));
        assert!(has(&edges, k(TaskKind::B, 1), k(TaskKind::B, 0)));
        assert!(has(&edges, k(TaskKind::B, 1), k(TaskKind::W, 0)));
        assert!(has(&edges, k(TaskKind::F, 1), k(TaskKind::B, 1)));
        assert!(has(&edges, k(TaskKind::F, 1), k(TaskKind::W, 1)));
        // nothing flows backwards
        assert!(!has(&edges, k(TaskKind::F, 1), k(TaskKind::F, 0)));
    }

    #[test]
    fn single_stage_chain() {
        let cfg = ParallelConfig::new(1, 1, 1, 1);
        let pl = make_placement(&cfg, &ModelSpec::uniform(1));
        let edges = build_dependency_edges(&pl, &cfg);
        let k = |kind| key(kind, 0, 0, 1, 1);
        assert!(has(&edges, k(TaskKind::F), k(TaskKind::B)));
        assert!(has(&edges, k(TaskKind::F), k(TaskKind::W)));
    }

    #[test]
    fn recompute_edges_only_on_non_last_stages() {
        let mut cfg = ParallelConfig::new(2, 2, 2, 2);
        cfg.recompute = Recompute::Full;
        let pl = make_placement(&cfg, &ModelSpec::uniform(4));
        let edges = build_dependency_edges(&pl, &cfg);
        let r0 = key(TaskKind::R, 0, 1, 2, 2);
        assert!(has(&edges, key(TaskKind::F, 0, 1, 2, 2), r0));
        assert!(has(&edges, r0, key(TaskKind::B, 0, 1, 2, 2)));
        assert!(has(&edges, r0, key(TaskKind::W, 0, 1, 2, 2)));
        assert!(!edges.iter().any(|e| e.before.kind == TaskKind::R && e.before.stage == Some(2)));
    }
}
