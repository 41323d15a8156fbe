use std::collections::VecDeque;

use super::assemble::{assemble, TaskFactory};
use super::recompute::insert_recompute;
use super::{Schedule, TaskKind, Variant};
use crate::model::{ModelSpec, ParallelConfig, Placement, Recompute};

type Order = Vec<Vec<(TaskKind, usize, usize)>>;

/// Completion times of the pipeline tasks seen so far, indexed by stage and micro-batch.
struct Done {
    microbatches: usize,
    f: Vec<f64>,
    b: Vec<f64>,
}

impl Done {
    fn new(stages: usize, microbatches: usize) -> Self {
        Done {
            microbatches,
            f: vec![f64::INFINITY; stages * microbatches],
            b: vec![f64::INFINITY; stages * microbatches],
        }
    }

    fn at(&self, kind: TaskKind, s: usize, m: usize) -> f64 {
        let i = s * self.microbatches + m;
        match kind {
            TaskKind::F => self.f[i],
            TaskKind::B => self.b[i],
            _ => 0.0,
        }
    }

    fn set(&mut self, kind: TaskKind, s: usize, m: usize, t: f64) {
        let i = s * self.microbatches + m;
        match kind {
            TaskKind::F => self.f[i] = t,
            TaskKind::B => self.b[i] = t,
            _ => {}
        }
    }
}

/// Pending work of one device within its current unit.
struct UnitQueues {
    /// F of rounds 0..V-1, round-major.
    forward: VecDeque<(usize, usize)>,
    /// Last mapped stage, micro-batches not yet started.
    last_f: VecDeque<usize>,
    last_b: Vec<usize>,
    last_w: Vec<usize>,
    /// (B, W) pairs of rounds V-2 down to 0.
    backward: VecDeque<(TaskKind, usize, usize)>,
}

impl UnitQueues {
    fn new(placement: &Placement, device: usize, mbs: std::ops::Range<usize>) -> Self {
        let v = placement.stages_per_device;
        let mut forward = VecDeque::new();
        let mut backward = VecDeque::new();
        for r in 0..v - 1 {
            let s = placement.stage_at(device, r);
            forward.extend(mbs.clone().map(|m| (s, m)));
        }
        for r in (0..v - 1).rev() {
            let s = placement.stage_at(device, r);
            for m in mbs.clone() {
                backward.push_back((TaskKind::B, s, m));
                backward.push_back((TaskKind::W, s, m));
            }
        }
        UnitQueues {
            forward,
            last_f: mbs.clone().collect(),
            last_b: Vec::new(),
            last_w: Vec::new(),
            backward,
        }
    }

    fn is_empty(&self) -> bool {
        self.forward.is_empty()
            && self.last_f.is_empty()
            && self.last_b.is_empty()
            && self.last_w.is_empty()
            && self.backward.is_empty()
    }
}

struct Ctx<'a> {
    placement: &'a Placement,
    stages: usize,
    done: Done,
    now: f64,
}

impl Ctx<'_> {
    fn finished(&self, kind: TaskKind, s: usize, m: usize) -> bool {
        self.done.at(kind, s, m) <= self.now
    }

    fn ready(&self, kind: TaskKind, s: usize, m: usize) -> bool {
        match kind {
            TaskKind::F => s == 0 || self.finished(TaskKind::F, s - 1, m),
            TaskKind::B | TaskKind::W => {
                if s + 1 < self.stages {
                    self.finished(TaskKind::B, s + 1, m)
                } else {
                    self.finished(TaskKind::F, s, m)
                }
            }
            _ => true,
        }
    }

    fn take_oldest_ready(&self, kind: TaskKind, stage: usize, pool: &mut Vec<usize>) -> Option<usize> {
        let (i, _) = pool
            .iter()
            .enumerate()
            .filter(|(_, &m)| self.ready(kind, stage, m))
            .min_by_key(|(_, &m)| m)?;
        Some(pool.swap_remove(i))
    }

    /// Next task for a device, or `None` if nothing in its unit can run now.
    fn pick(&self, device: usize, q: &mut UnitQueues) -> Option<(TaskKind, usize, usize)> {
        let last = self.placement.last_stage_of(device);
        if let Some(&(s, m)) = q.forward.front() {
            if self.ready(TaskKind::F, s, m) {
                q.forward.pop_front();
                return Some((TaskKind::F, s, m));
            }
            return self.take_oldest_ready(TaskKind::W, last, &mut q.last_w).map(|m| (TaskKind::W, last, m));
        }
        if !q.last_f.is_empty() || !q.last_b.is_empty() {
            if let Some(m) = self.take_oldest_ready(TaskKind::B, last, &mut q.last_b) {
                q.last_w.push(m);
                return Some((TaskKind::B, last, m));
            }
            if let Some(&m) = q.last_f.front() {
                if self.ready(TaskKind::F, last, m) {
                    q.last_f.pop_front();
                    q.last_b.push(m);
                    return Some((TaskKind::F, last, m));
                }
            }
            return self.take_oldest_ready(TaskKind::W, last, &mut q.last_w).map(|m| (TaskKind::W, last, m));
        }
        if let Some(&(k, s, m)) = q.backward.front() {
            if self.ready(k, s, m) {
                q.backward.pop_front();
                return Some((k, s, m));
            }
        }
        self.take_oldest_ready(TaskKind::W, last, &mut q.last_w).map(|m| (TaskKind::W, last, m))
    }
}

/// Greedy list scheduling of F/B/W per device and unit. Returns the compute
/// order of every device.
/// A task in flight and its end time.
type Running = ((TaskKind, usize, usize), f64);

fn order_zeropp(model: &ModelSpec, cfg: &ParallelConfig, placement: &Placement) -> Order {
    let p = placement.num_devices;
    let stages = placement.num_stages();
    let b = cfg.microbatches;
    let u = cfg.unit_size;
    let units = cfg.num_units();
    let factory = TaskFactory {
        model,
        cfg,
        placement,
        variant: Variant::Zeropp,
    };
    let cost = |k: TaskKind, s: usize| factory.compute(k, s, 0).cost;

    let mut ctx = Ctx {
        placement,
        stages,
        done: Done::new(stages, b),
        now: 0.0,
    };
    let mut unit_of = vec![0usize; p];
    let mut queues: Vec<UnitQueues> = (0..p).map(|d| UnitQueues::new(placement, d, 0..u.min(b))).collect();
    let mut running: Vec<Option<Running>> = vec![None; p];
    let mut order: Order = vec![Vec::new(); p];
    let total = 3 * stages * b;
    let mut finished = 0;

    while finished < total {
        loop {
            let mut progressed = false;
            for slot in running.iter_mut() {
                if let Some(((k, s, m), end)) = *slot {
                    if end <= ctx.now {
                        ctx.done.set(k, s, m, end);
                        *slot = None;
                        finished += 1;
                        progressed = true;
                    }
                }
            }
            for d in 0..p {
                if running[d].is_some() {
                    continue;
                }
                while queues[d].is_empty() && unit_of[d] + 1 < units {
                    unit_of[d] += 1;
                    let lo = unit_of[d] * u;
                    queues[d] = UnitQueues::new(placement, d, lo..(lo + u).min(b));
                }
                if let Some(task) = ctx.pick(d, &mut queues[d]) {
                    let end = ctx.now + cost(task.0, task.1);
                    running[d] = Some((task, end));
                    order[d].push(task);
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
        if finished == total {
            break;
        }
        ctx.now = running
            .iter()
            .flatten()
            .map(|&(_, end)| end)
            .filter(|&end| end > ctx.now)
            .fold(f64::INFINITY, f64::min);
        assert!(ctx.now.is_finite(), "zeropp list scheduler stalled with {finished}/{total} tasks done");
    }
    order
}

/// ZeroPP schedule: per unit, a breadth-first forward process over the
/// device's earlier stages, an interleaved F/B process on its last stage with
/// weight gradients filling idle slots, and a breadth-first backward process.
pub fn gen_zeropp(model: &ModelSpec, cfg: &ParallelConfig, placement: &Placement) -> Schedule {
    let mut order = order_zeropp(model, cfg, placement);
    if cfg.recompute == Recompute::Full {
        if cfg.stages_per_device == 1 {
            log::warn!("recompute requested with one stage per device; no stage is recomputed");
        }
        for (d, o) in order.iter_mut().enumerate() {
            *o = insert_recompute(o, placement, d);
        }
    }
    let factory = TaskFactory {
        model,
        cfg,
        placement,
        variant: Variant::Zeropp,
    };
    assemble(&factory, order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_placement;

    fn build(p: usize, v: usize, b: usize, u: usize) -> (Schedule, ParallelConfig, Placement) {
        let cfg = ParallelConfig::new(p, v, b, u);
        let model = ModelSpec::uniform(p * v);
        let pl = make_placement(&cfg, &model);
        (gen_zeropp(&model, &cfg, &pl), cfg, pl)
    }

    #[test]
    fn single_device_order() {
        let (s, _, _) = build(1, 1, 1, 1);
        let kinds: Vec<_> = s.device_tasks(0).map(|t| t.kind).collect();
        assert_eq!(
            kinds,
            [
                TaskKind::AgParam,
                TaskKind::F,
                TaskKind::AgParam,
                TaskKind::B,
                TaskKind::W,
                TaskKind::RsGrad,
                TaskKind::ArGrad,
                TaskKind::Opt
            ]
        );
    }

    #[test]
    fn one_unit_has_two_gathers_and_one_scatter_per_stage() {
        let (s, cfg, _) = build(4, 2, 8, 8);
        for stage in 0..cfg.num_stages() {
            let ag = s.tasks.iter().filter(|t| t.kind == TaskKind::AgParam && t.stage == Some(stage)).count();
            let rs = s.tasks.iter().filter(|t| t.kind == TaskKind::RsGrad && t.stage == Some(stage)).count();
            assert_eq!((ag, rs), (2, 1), "stage {stage}");
        }
    }

    #[test]
    fn task_counts_two_units() {
        let (s, _, _) = build(2, 2, 4, 2);
        // independent enumeration: stages × micro-batches per kind, stages × units per collective
        let (stages, b, units) = (4, 4, 2);
        assert_eq!(s.count(TaskKind::F), stages * b);
        assert_eq!(s.count(TaskKind::B), stages * b);
        assert_eq!(s.count(TaskKind::W), stages * b);
        assert_eq!(s.count(TaskKind::AgParam), units * stages * 2);
        assert_eq!(s.count(TaskKind::RsGrad), units * stages);
        assert_eq!(s.count(TaskKind::ArGrad), 2);
        assert_eq!(s.count(TaskKind::R), 0);
    }

    #[test]
    fn units_are_emitted_in_sequence() {
        let (s, _, _) = build(4, 2, 8, 2);
        for d in 0..4 {
            let units: Vec<_> = s.device_tasks(d).filter(|t| t.kind.is_pipeline()).map(|t| t.unit).collect();
            assert!(units.windows(2).all(|w| w[0] <= w[1]), "device {d}: {units:?}");
        }
    }

    #[test]
    fn forward_is_breadth_first_within_a_round() {
        let (s, _, pl) = build(2, 2, 4, 4);
        let fs: Vec<_> = s
            .device_tasks(0)
            .filter(|t| t.kind == TaskKind::F && !pl.is_last_mapped(t.stage.unwrap()))
            .map(|t| t.microbatch.unwrap())
            .collect();
        assert_eq!(fs, [0, 1, 2, 3]);
    }

    #[test]
    fn deterministic() {
        assert_eq!(build(4, 2, 8, 4).0, build(4, 2, 8, 4).0);
    }
}
