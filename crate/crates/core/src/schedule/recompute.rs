use super::assemble::derive_edges;
use super::{Schedule, Task, TaskKind, Variant};
use crate::model::{ParallelConfig, Placement};

/// Inserts `R(s,m)` right before `B(s,m)` for every stage of `device` except its last.
pub(crate) fn insert_recompute(
    order: &[(TaskKind, usize, usize)],
    placement: &Placement,
    device: usize,
) -> Vec<(TaskKind, usize, usize)> {
    let last = placement.last_stage_of(device);
    let mut out = Vec::with_capacity(order.len() * 4 / 3 + 1);
    for &(k, s, m) in order {
        if k == TaskKind::B && s != last {
            out.push((TaskKind::R, s, m));
        }
        out.push((k, s, m));
    }
    out
}

/// Adds recomputation to an existing ZeroPP schedule: one `R(s,m)` per
/// (stage, micro-batch) of every non-last mapped stage, placed just before its
/// `B(s,m)`. R costs the same as the stage forward.
pub fn apply_recompute(sched: Schedule, cfg: &ParallelConfig, placement: &Placement) -> Schedule {
    if sched.variant != Variant::Zeropp {
        log::warn!("recompute only applies to ZEROPP schedules; {} left unchanged", sched.variant);
        return sched;
    }
    if cfg.stages_per_device == 1 {
        log::warn!("recompute requested with one stage per device; no stage is recomputed");
        return sched;
    }
    if sched.count(TaskKind::R) > 0 {
        return sched;
    }
    let Schedule {
        variant,
        unit_size,
        mut tasks,
        per_device,
        ..
    } = sched;
    let forward_cost = |tasks: &[Task], s: usize, m: usize| {
        tasks
            .iter()
            .find(|t| t.kind == TaskKind::F && t.stage == Some(s) && t.microbatch == Some(m))
            .map_or(0.0, |t| t.cost)
    };
    let mut new_per_device = Vec::with_capacity(per_device.len());
    for (d, ids) in per_device.into_iter().enumerate() {
        let last = placement.last_stage_of(d);
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            let t = tasks[id].clone();
            if let (TaskKind::B, Some(s), Some(m)) = (t.kind, t.stage, t.microbatch) {
                if s != last {
                    let r = Task {
                        kind: TaskKind::R,
                        cost: forward_cost(&tasks, s, m),
                        ..t
                    };
                    out.push(tasks.len());
                    tasks.push(r);
                }
            }
            out.push(id);
        }
        new_per_device.push(out);
    }
    let mut sched = Schedule {
        variant,
        unit_size,
        tasks,
        per_device: new_per_device,
        edges: Vec::new(),
    };
    sched.edges = derive_edges(&sched, placement.num_stages());
    sched
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_placement, ModelSpec, Recompute};
    use crate::schedule::gen_zeropp;

    fn setup(p: usize, v: usize, b: usize, u: usize) -> (ModelSpec, ParallelConfig, Placement) {
        let cfg = ParallelConfig::new(p, v, b, u);
        let model = ModelSpec::uniform(p * v);
        let pl = make_placement(&cfg, &model);
        (model, cfg, pl)
    }

    #[test]
    fn half_the_stages_recompute_when_v_is_two() {
        let (model, cfg, pl) = setup(4, 2, 4, 4);
        let s = apply_recompute(gen_zeropp(&model, &cfg, &pl), &cfg, &pl);
        let mut stages: Vec<_> = s.tasks.iter().filter(|t| t.kind == TaskKind::R).map(|t| t.stage.unwrap()).collect();
        stages.sort();
        stages.dedup();
        assert_eq!(stages, [0, 1, 2, 3]);
    }

    #[test]
    fn v1_is_unchanged() {
        let (model, cfg, pl) = setup(4, 1, 4, 4);
        let base = gen_zeropp(&model, &cfg, &pl);
        assert_eq!(apply_recompute(base.clone(), &cfg, &pl), base);
    }

    #[test]
    fn r_count_p2_v3() {
        let (model, mut cfg, pl) = setup(2, 3, 6, 6);
        let s = apply_recompute(gen_zeropp(&model, &cfg, &pl), &cfg, &pl);
        // (V-1) recomputed stages per device × P devices × B micro-batches
        assert_eq!(s.count(TaskKind::R), 2 * 2 * 6);
        cfg.recompute = Recompute::Full;
        let direct = gen_zeropp(&model, &cfg, &pl);
        assert_eq!(direct.count(TaskKind::R), 24);
    }

    #[test]
    fn r_sits_right_before_its_backward_pair() {
        let (model, cfg, pl) = setup(2, 2, 4, 2);
        let s = apply_recompute(gen_zeropp(&model, &cfg, &pl), &cfg, &pl);
        for ids in &s.per_device {
            let compute: Vec<_> = ids.iter().map(|&i| &s.tasks[i]).filter(|t| t.kind.is_pipeline()).collect();
            for (i, t) in compute.iter().enumerate() {
                if t.kind == TaskKind::R {
                    let next = compute[i + 1];
                    assert_eq!((next.kind, next.stage, next.microbatch), (TaskKind::B, t.stage, t.microbatch));
                    let after = compute[i + 2];
                    assert_eq!((after.kind, after.stage, after.microbatch), (TaskKind::W, t.stage, t.microbatch));
                }
            }
        }
    }
}
