//! Event-driven replay of a schedule over per-device compute and comm streams.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use serde::Serialize;

use crate::model::{CommCostModel, HybridMode, ModelSpec, ParallelConfig, Placement};
use crate::schedule::{buffer_plan, Schedule, TaskId, TaskKey, TaskKind};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("deadlock at t={time}: no task can start; blocked frontier: {}", fmt_keys(.frontier))]
    Deadlock { time: f64, frontier: Vec<TaskKey> },
    #[error("bubble slots need uniform task costs; this run mixes costs")]
    NonUniformCosts,
    #[error("slot length must be positive, got {0}")]
    BadSlot(f64),
}

fn fmt_keys(keys: &[TaskKey]) -> String {
    keys.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(", ")
}

/// Memory split by what it holds. Used both for current levels and peaks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct MemoryBreakdown {
    pub weights: f64,
    pub activations: f64,
    pub gradients: f64,
    pub optimizer: f64,
}

impl MemoryBreakdown {
    pub fn total(&self) -> f64 {
        self.weights + self.activations + self.gradients + self.optimizer
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct MemoryPeak {
    /// Peak of the summed footprint.
    pub total: f64,
    /// Peak of each component on its own; these need not coincide in time.
    pub components: MemoryBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimResult {
    /// `(start, end)` per task id.
    pub task_times: Vec<(f64, f64)>,
    pub makespan: f64,
    /// Time each device spends on compute tasks.
    pub per_device_busy: Vec<f64>,
    /// `makespan - busy`.
    pub per_device_idle: Vec<f64>,
    /// Time each device's collectives take.
    pub per_device_comm: Vec<f64>,
    pub peak_mem: Vec<MemoryPeak>,
    /// Total bytes per device after every change, starting from the persistent floor.
    pub mem_trace: Vec<Vec<(f64, f64)>>,
    /// Persistent part of the footprint per device (shards and optimizer state).
    pub persistent_mem: Vec<MemoryBreakdown>,
    pub comm_bytes_intra: Vec<f64>,
    pub comm_bytes_inter: Vec<f64>,
    /// The common cost of every pipeline task, when they all share one.
    pub uniform_task_cost: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Event {
    time: f64,
    task: TaskId,
}

impl Eq for Event {}

impl Ord for Event {
    // min-heap on (time, task id)
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then_with(|| other.task.cmp(&self.task))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn duration(kind: TaskKind, cost: f64, bytes: f64, costs: &CommCostModel) -> f64 {
    if kind.is_compute() {
        return cost;
    }
    if bytes <= 0.0 {
        return 0.0;
    }
    let bw = if kind.is_inter_node() {
        costs.inter_node_bandwidth
    } else {
        costs.intra_node_bandwidth
    };
    bytes / bw + costs.per_collective_latency
}

fn uniform_cost(sched: &Schedule) -> Option<f64> {
    let mut costs = sched.tasks.iter().filter(|t| t.kind.is_pipeline()).map(|t| t.cost);
    let first = costs.next()?;
    costs.all(|c| c == first).then_some(first)
}

/// Persistent per-device footprint: parameter and gradient shards plus
/// optimizer state. Variants without sharding keep full replicas.
pub fn persistent_memory(
    sharded: bool,
    model: &ModelSpec,
    cfg: &ParallelConfig,
    placement: &Placement,
    device: usize,
) -> MemoryBreakdown {
    let params = placement.layers_on_device(device) as f64 * model.weight_mem_per_layer;
    let shard = if sharded { params / cfg.dp_size as f64 } else { params };
    let mut optimizer = cfg.optimizer_state_multiplier * shard;
    if sharded && cfg.hybrid_mode == HybridMode::Zero1Outer {
        optimizer /= cfg.inter_node_dp as f64;
    }
    MemoryBreakdown {
        weights: shard,
        activations: 0.0,
        gradients: shard,
        optimizer,
    }
}

struct Memory {
    current: Vec<MemoryBreakdown>,
    peak: Vec<MemoryPeak>,
    trace: Vec<Vec<(f64, f64)>>,
}

#[derive(Clone, Copy)]
enum Part {
    Weights,
    Activations,
}

impl Memory {
    fn change(&mut self, device: usize, part: Part, delta: f64, now: f64) {
        if delta == 0.0 {
            return;
        }
        let cur = &mut self.current[device];
        let peak = &mut self.peak[device];
        match part {
            Part::Weights => {
                cur.weights += delta;
                peak.components.weights = peak.components.weights.max(cur.weights);
            }
            Part::Activations => {
                cur.activations += delta;
                peak.components.activations = peak.components.activations.max(cur.activations);
            }
        }
        let total = cur.total();
        peak.total = peak.total.max(total);
        let trace = &mut self.trace[device];
        match trace.last_mut() {
            Some(last) if last.0 == now => last.1 = total,
            _ => trace.push((now, total)),
        }
    }
}

/// Runs the schedule. Each device has a compute stream and a comm stream that
/// overlap when `costs.overlap_with_compute` is set; otherwise one stream runs
/// the device list in order. A task starts once its stream reaches it and all
/// its predecessors have finished. Completions at an instant are applied
/// before any start at that instant.
pub fn simulate(
    sched: &Schedule,
    model: &ModelSpec,
    cfg: &ParallelConfig,
    placement: &Placement,
    costs: &CommCostModel,
) -> Result<SimResult, SimError> {
    let n = sched.tasks.len();
    let p = sched.num_devices();
    let sharded = sched.variant.is_sharded();

    // streams: [device][0 = compute, 1 = comm]
    let mut streams: Vec<[Vec<TaskId>; 2]> = vec![[Vec::new(), Vec::new()]; p];
    for (d, ids) in sched.per_device.iter().enumerate() {
        for &id in ids {
            let lane = usize::from(costs.overlap_with_compute && sched.tasks[id].kind.is_collective());
            streams[d][lane].push(id);
        }
    }
    let mut head = vec![[0usize; 2]; p];
    let mut stream_busy = vec![[false; 2]; p];

    let mut waiting = vec![0usize; n];
    let mut succs: Vec<Vec<TaskId>> = vec![Vec::new(); n];
    for &(a, b) in &sched.edges {
        waiting[b] += 1;
        succs[a].push(b);
    }

    // activation bookkeeping per (stage, micro-batch)
    let mut recomputed: HashMap<(usize, usize), ()> = HashMap::new();
    let mut grad_tasks_left: HashMap<(usize, usize), usize> = HashMap::new();
    for t in &sched.tasks {
        if let (Some(s), Some(m)) = (t.stage, t.microbatch) {
            match t.kind {
                TaskKind::R => {
                    recomputed.insert((s, m), ());
                }
                TaskKind::B | TaskKind::W => *grad_tasks_left.entry((s, m)).or_insert(0) += 1,
                _ => {}
            }
        }
    }
    let mut act_held: HashMap<(usize, usize), f64> = HashMap::new();

    let plan = buffer_plan(sched);
    let mut buffer_users_left: Vec<usize> = plan.buffers.iter().map(|b| b.users.len()).collect();
    let mut buffer_gathers_left: Vec<usize> = plan.buffers.iter().map(|b| b.gathers.len()).collect();

    let persistent: Vec<MemoryBreakdown> = (0..p)
        .map(|d| {
            if d < placement.num_devices {
                persistent_memory(sharded, model, cfg, placement, d)
            } else {
                MemoryBreakdown::default()
            }
        })
        .collect();
    let mut mem = Memory {
        current: persistent.clone(),
        peak: persistent
            .iter()
            .map(|m| MemoryPeak {
                total: m.total(),
                components: *m,
            })
            .collect(),
        trace: persistent.iter().map(|m| vec![(0.0, m.total())]).collect(),
    };

    let mut times = vec![(f64::NAN, f64::NAN); n];
    let mut done = vec![false; n];
    let mut finished = 0;
    let mut heap = BinaryHeap::new();
    let mut now = 0.0;
    let mut busy = vec![0.0; p];
    let mut comm_time = vec![0.0; p];
    let mut intra = vec![0.0; p];
    let mut inter = vec![0.0; p];

    loop {
        // start everything that can start at `now`
        for d in 0..p {
            for lane in 0..2 {
                if stream_busy[d][lane] {
                    continue;
                }
                let Some(&id) = streams[d][lane].get(head[d][lane]) else { continue };
                if waiting[id] > 0 {
                    continue;
                }
                let t = &sched.tasks[id];
                let dur = duration(t.kind, t.cost, t.bytes, costs);
                times[id] = (now, now + dur);
                head[d][lane] += 1;
                stream_busy[d][lane] = true;
                heap.push(Event { time: now + dur, task: id });
                if t.kind.is_compute() {
                    busy[d] += dur;
                } else {
                    comm_time[d] += dur;
                    if t.kind.is_inter_node() {
                        inter[d] += t.bytes;
                    } else {
                        intra[d] += t.bytes;
                    }
                }
                // allocations at start
                match (t.kind, t.stage, t.microbatch) {
                    (TaskKind::F, Some(s), Some(m)) => {
                        let layers = placement.layers_in(s) as f64;
                        let bytes = if recomputed.contains_key(&(s, m)) { 1.0 } else { layers }
                            * model.act_mem_per_layer_per_microbatch;
                        *act_held.entry((s, m)).or_insert(0.0) += bytes;
                        mem.change(d, Part::Activations, bytes, now);
                    }
                    (TaskKind::R, Some(s), Some(m)) => {
                        let bytes = placement.layers_in(s) as f64 * model.act_mem_per_layer_per_microbatch;
                        *act_held.entry((s, m)).or_insert(0.0) += bytes;
                        mem.change(d, Part::Activations, bytes, now);
                    }
                    (TaskKind::AgParam, Some(s), _) => {
                        if let Some(b) = plan.task_buffer[id] {
                            if plan.buffers[b].gathers.first() == Some(&id) {
                                let bytes = placement.layers_in(s) as f64 * model.weight_mem_per_layer;
                                mem.change(d, Part::Weights, bytes, now);
                            }
                        }
                    }
                    _ => {}
                }
            }
        }

        // next instant: complete every task that ends then
        let Some(first) = heap.pop() else { break };
        now = first.time;
        let mut batch = vec![first.task];
        while heap.peek().is_some_and(|e| e.time == now) {
            batch.push(heap.pop().expect("peeked").task);
        }
        for id in batch {
            let t = &sched.tasks[id];
            let d = t.device.min(p - 1);
            let lane = usize::from(costs.overlap_with_compute && t.kind.is_collective());
            stream_busy[d][lane] = false;
            done[id] = true;
            finished += 1;
            for &s in &succs[id] {
                waiting[s] -= 1;
            }
            // frees at completion
            if let (TaskKind::B | TaskKind::W, Some(s), Some(m)) = (t.kind, t.stage, t.microbatch) {
                let left = grad_tasks_left.get_mut(&(s, m)).expect("counted");
                *left -= 1;
                if *left == 0 {
                    if let Some(bytes) = act_held.remove(&(s, m)) {
                        mem.change(d, Part::Activations, -bytes, now);
                    }
                }
            }
            if let Some(b) = plan.task_buffer[id] {
                let buf = &plan.buffers[b];
                if t.kind == TaskKind::AgParam {
                    buffer_gathers_left[b] -= 1;
                } else {
                    buffer_users_left[b] -= 1;
                }
                if buffer_users_left[b] == 0 && buffer_gathers_left[b] == 0 {
                    let bytes = placement.layers_in(buf.stage) as f64 * model.weight_mem_per_layer;
                    mem.change(d, Part::Weights, -bytes, now);
                    // never release twice
                    buffer_gathers_left[b] = usize::MAX / 2;
                }
            }
        }
    }

    if finished < n {
        let mut frontier = Vec::new();
        for d in 0..p {
            for lane in 0..2 {
                if let Some(&id) = streams[d][lane].get(head[d][lane]) {
                    frontier.push(sched.tasks[id].key());
                }
            }
        }
        return Err(SimError::Deadlock { time: now, frontier });
    }

    let makespan = times.iter().map(|t| t.1).fold(0.0, f64::max);
    let idle = busy.iter().map(|b| makespan - b).collect();
    Ok(SimResult {
        task_times: times,
        makespan,
        per_device_busy: busy,
        per_device_idle: idle,
        per_device_comm: comm_time,
        peak_mem: mem.peak,
        mem_trace: mem.trace,
        persistent_mem: persistent,
        comm_bytes_intra: intra,
        comm_bytes_inter: inter,
        uniform_task_cost: uniform_cost(sched),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BubbleCount {
    pub per_device: Vec<f64>,
    pub max: f64,
}

/// Idle time of each device in slots of `unit_task_time`.
pub fn bubble_count(result: &SimResult, unit_task_time: f64) -> Result<BubbleCount, SimError> {
    if result.uniform_task_cost.is_none() {
        return Err(SimError::NonUniformCosts);
    }
    if unit_task_time <= 0.0 || !unit_task_time.is_finite() {
        return Err(SimError::BadSlot(unit_task_time));
    }
    let per_device: Vec<f64> = result.per_device_idle.iter().map(|i| i / unit_task_time).collect();
    let max = per_device.iter().copied().fold(0.0, f64::max);
    Ok(BubbleCount { per_device, max })
}

/// Idle over busy time per device.
pub fn bubble_ratio(result: &SimResult) -> Vec<f64> {
    result
        .per_device_idle
        .iter()
        .zip(&result.per_device_busy)
        .map(|(i, b)| if *b > 0.0 { i / b } else { 0.0 })
        .collect()
}

pub fn peak_memory(result: &SimResult) -> Vec<MemoryPeak> {
    result.peak_mem.clone()
}

/// `(intra-node, inter-node)` bytes sent per device.
pub fn comm_volume(result: &SimResult) -> Vec<(f64, f64)> {
    result
        .comm_bytes_intra
        .iter()
        .copied()
        .zip(result.comm_bytes_inter.iter().copied())
        .collect()
}
