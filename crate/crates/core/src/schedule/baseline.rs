use super::assemble::{assemble, TaskFactory};
use super::{Schedule, ScheduleError, TaskKind, Variant};
use crate::model::{ModelSpec, ParallelConfig, Placement, Recompute};

type DeviceOrder = Vec<(TaskKind, usize, usize)>;

/// Breadth-first schedule with sharded parameters: every micro-batch of a
/// stage runs back to back so one gather serves all of them. Backward tasks
/// carry the weight gradient. The whole batch is one unit.
pub fn gen_bfpp(model: &ModelSpec, cfg: &ParallelConfig, placement: &Placement) -> Schedule {
    if cfg.recompute == Recompute::Full {
        log::warn!("BFPP does not recompute; ignoring recompute setting");
    }
    let v = placement.stages_per_device;
    let orders = (0..placement.num_devices)
        .map(|d| {
            let mut o = Vec::with_capacity(2 * v * cfg.microbatches);
            for r in 0..v {
                let s = placement.stage_at(d, r);
                o.extend((0..cfg.microbatches).map(|m| (TaskKind::F, s, m)));
            }
            for r in (0..v).rev() {
                let s = placement.stage_at(d, r);
                o.extend((0..cfg.microbatches).map(|m| (TaskKind::B, s, m)));
            }
            o
        })
        .collect();
    let factory = TaskFactory {
        model,
        cfg,
        placement,
        variant: Variant::Bfpp,
    };
    assemble(&factory, orders)
}

fn gpipe(placement: &Placement, b: usize, d: usize) -> DeviceOrder {
    let s = placement.stage_at(d, 0);
    (0..b)
        .map(|m| (TaskKind::F, s, m))
        .chain((0..b).map(|m| (TaskKind::B, s, m)))
        .collect()
}

fn one_f_one_b(placement: &Placement, b: usize, d: usize) -> DeviceOrder {
    let p = placement.num_devices;
    let s = placement.stage_at(d, 0);
    let warmup = (p - d - 1).min(b);
    let mut o: DeviceOrder = (0..warmup).map(|m| (TaskKind::F, s, m)).collect();
    for i in 0..b - warmup {
        o.push((TaskKind::F, s, warmup + i));
        o.push((TaskKind::B, s, i));
    }
    o.extend((b - warmup..b).map(|m| (TaskKind::B, s, m)));
    o
}

/// Interleaved 1F1B over virtual micro-batches, in Megatron's ordering:
/// chunks advance every P virtual steps, micro-batches are taken P at a time.
fn interleaved(placement: &Placement, b: usize, d: usize) -> DeviceOrder {
    let p = placement.num_devices;
    let v = placement.stages_per_device;
    let total = b * v;
    let warmup = ((p - d - 1) * 2 + (v - 1) * p).min(total);
    let mb = |k: usize| (k / (p * v)) * p + k % p;
    let fwd = |k: usize| (TaskKind::F, placement.stage_at(d, (k % (p * v)) / p), mb(k));
    let bwd = |k: usize| (TaskKind::B, placement.stage_at(d, v - 1 - (k % (p * v)) / p), mb(k));
    let mut o: DeviceOrder = (0..warmup).map(fwd).collect();
    for i in 0..total - warmup {
        o.push(fwd(warmup + i));
        o.push(bwd(i));
    }
    o.extend((total - warmup..total).map(bwd));
    o
}

/// GPipe, 1F1B and interleaved 1F1B with fused backward tasks and replicated
/// parameters (no gathers or gradient reduce-scatters).
pub fn gen_baseline(
    variant: Variant,
    model: &ModelSpec,
    cfg: &ParallelConfig,
    placement: &Placement,
) -> Result<Schedule, ScheduleError> {
    let v = placement.stages_per_device;
    let p = placement.num_devices;
    let b = cfg.microbatches;
    let mismatch = |reason: String| Err(ScheduleError::VariantMismatch { variant, reason });
    let per_device: fn(&Placement, usize, usize) -> DeviceOrder = match variant {
        Variant::Gpipe | Variant::OneFOneB if v != 1 => {
            return mismatch(format!("needs one stage per device, got V={v}"));
        }
        Variant::Gpipe => gpipe,
        Variant::OneFOneB => one_f_one_b,
        Variant::Interleaved1F1B if v == 1 => one_f_one_b,
        Variant::Interleaved1F1B if !b.is_multiple_of(p) => {
            return mismatch(format!("needs B divisible by P, got B={b}, P={p}"));
        }
        Variant::Interleaved1F1B => interleaved,
        Variant::Zeropp | Variant::Bfpp => {
            return mismatch("not a baseline variant".into());
        }
    };
    if cfg.recompute == Recompute::Full {
        log::warn!("{variant} does not model recompute; ignoring recompute setting");
    }
    let orders = (0..p).map(|d| per_device(placement, b, d)).collect();
    let factory = TaskFactory {
        model,
        cfg,
        placement,
        variant,
    };
    Ok(assemble(&factory, orders))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_placement;

    fn setup(p: usize, v: usize, b: usize) -> (ModelSpec, ParallelConfig, Placement) {
        let cfg = ParallelConfig::new(p, v, b, b);
        let model = ModelSpec::uniform(p * v);
        let pl = make_placement(&cfg, &model);
        (model, cfg, pl)
    }

    fn order(s: &Schedule, d: usize) -> Vec<(TaskKind, usize, usize)> {
        s.compute_order(d)
    }

    #[test]
    fn bfpp_forward_groups_by_stage() {
        let (model, cfg, pl) = setup(2, 2, 3);
        let s = gen_bfpp(&model, &cfg, &pl);
        let fwd: Vec<_> = order(&s, 0).into_iter().filter(|t| t.0 == TaskKind::F).map(|t| (t.1, t.2)).collect();
        assert_eq!(fwd, [(0, 0), (0, 1), (0, 2), (2, 0), (2, 1), (2, 2)]);
    }

    #[test]
    fn bfpp_gathers_twice_per_stage() {
        let (model, cfg, pl) = setup(2, 1, 3);
        let s = gen_bfpp(&model, &cfg, &pl);
        for stage in 0..2 {
            let ag = s.tasks.iter().filter(|t| t.kind == TaskKind::AgParam && t.stage == Some(stage)).count();
            assert_eq!(ag, 2);
        }
        assert_eq!(s.count(TaskKind::W), 0);
    }

    #[test]
    fn bfpp_single_microbatch_matches_zeropp_without_w() {
        let (model, cfg, pl) = setup(2, 2, 1);
        let bf = gen_bfpp(&model, &cfg, &pl);
        let zp = crate::schedule::gen_zeropp(&model, &cfg, &pl);
        for d in 0..2 {
            let z: Vec<_> = order(&zp, d).into_iter().filter(|t| t.0 != TaskKind::W).collect();
            assert_eq!(order(&bf, d), z);
        }
    }

    #[test]
    fn gpipe_all_forwards_first() {
        let (model, cfg, pl) = setup(4, 1, 8);
        let s = gen_baseline(Variant::Gpipe, &model, &cfg, &pl).unwrap();
        let kinds: Vec<_> = order(&s, 0).into_iter().map(|t| t.0).collect();
        assert!(kinds[..8].iter().all(|&k| k == TaskKind::F));
        assert!(kinds[8..].iter().all(|&k| k == TaskKind::B));
        assert_eq!(s.count(TaskKind::AgParam), 0);
    }

    #[test]
    fn one_f_one_b_single_device_alternates() {
        let (model, cfg, pl) = setup(1, 1, 3);
        let s = gen_baseline(Variant::OneFOneB, &model, &cfg, &pl).unwrap();
        let kinds: Vec<_> = order(&s, 0).into_iter().map(|t| t.0).collect();
        assert_eq!(kinds, [TaskKind::F, TaskKind::B, TaskKind::F, TaskKind::B, TaskKind::F, TaskKind::B]);
    }

    #[test]
    fn v_mismatch_rejected() {
        let (model, cfg, pl) = setup(2, 2, 4);
        assert!(matches!(
            gen_baseline(Variant::Gpipe, &model, &cfg, &pl),
            Err(ScheduleError::VariantMismatch { .. })
        ));
        let (model, cfg, pl) = setup(4, 2, 6);
        assert!(gen_baseline(Variant::Interleaved1F1B, &model, &cfg, &pl).is_err());
    }

    #[test]
    fn interleaved_covers_every_task_once() {
        let (model, cfg, pl) = setup(4, 2, 8);
        let s = gen_baseline(Variant::Interleaved1F1B, &model, &cfg, &pl).unwrap();
        assert_eq!(s.count(TaskKind::F), 64);
        assert_eq!(s.count(TaskKind::B), 64);
        let idx = s.index();
        assert_eq!(idx.len(), s.tasks.len());
    }
}
