//! Static checks on a schedule: every task present once, on the right device,
//! in an order that respects the dependency DAG and unit isolation.

use std::collections::HashMap;
use std::fmt;

use serde::Serialize;

use crate::model::{HybridMode, ParallelConfig, Placement, Recompute};
use crate::schedule::{identity_edges, Schedule, TaskId, TaskKey, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationKind {
    DepOrder,
    MissingTask,
    DuplicateTask,
    UnitLeak,
    RecomputeCount,
    DeviceMismatch,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationKind::DepOrder => "DEP_ORDER",
            ViolationKind::MissingTask => "MISSING_TASK",
            ViolationKind::DuplicateTask => "DUPLICATE_TASK",
            ViolationKind::UnitLeak => "UNIT_LEAK",
            ViolationKind::RecomputeCount => "RECOMPUTE_COUNT",
            ViolationKind::DeviceMismatch => "DEVICE_MISMATCH",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub tasks: Vec<TaskKey>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)?;
        let names: Vec<String> = self.tasks.iter().map(|k| k.to_string()).collect();
        write!(f, " [{}]", names.join(", "))
    }
}

struct Report<'a> {
    sched: &'a Schedule,
    out: Vec<Violation>,
}

impl Report<'_> {
    fn push(&mut self, kind: ViolationKind, ids: &[TaskId], message: String) {
        let tasks = ids.iter().map(|&i| self.sched.tasks[i].key()).collect();
        self.out.push(Violation { kind, tasks, message });
    }

    fn push_keys(&mut self, kind: ViolationKind, tasks: Vec<TaskKey>, message: String) {
        self.out.push(Violation { kind, tasks, message });
    }
}

/// Checks a schedule against its placement and config. An empty result means
/// the schedule is valid.
pub fn validate(sched: &Schedule, placement: &Placement, cfg: &ParallelConfig) -> Vec<Violation> {
    let mut r = Report { sched, out: Vec::new() };
    let position = check_membership(&mut r, placement);
    let in_bounds = check_devices(&mut r, placement, cfg);
    check_counts(&mut r, placement, cfg);
    check_units(&mut r, &in_bounds);
    check_order(&mut r, placement, &position);
    r.out
}

/// Every task sits in exactly one device list, the one named by its device field.
/// Returns `(device, index)` per task.
fn check_membership(r: &mut Report<'_>, placement: &Placement) -> Vec<Option<(usize, usize)>> {
    let sched = r.sched;
    let mut position = vec![None; sched.tasks.len()];
    for (d, ids) in sched.per_device.iter().enumerate() {
        for (i, &id) in ids.iter().enumerate() {
            if id >= sched.tasks.len() {
                r.push_keys(
                    ViolationKind::DeviceMismatch,
                    Vec::new(),
                    format!("device {d} lists unknown task id {id}"),
                );
                continue;
            }
            if position[id].is_some() {
                r.push(ViolationKind::DuplicateTask, &[id], format!("listed more than once (again on device {d})"));
                continue;
            }
            position[id] = Some((d, i));
            if sched.tasks[id].device != d || d >= placement.num_devices {
                r.push(
                    ViolationKind::DeviceMismatch,
                    &[id],
                    format!("task says device {} but is listed on device {d}", sched.tasks[id].device),
                );
            }
        }
    }
    for (id, p) in position.iter().enumerate() {
        if p.is_none() {
            r.push(ViolationKind::MissingTask, &[id], "task is not on any device list".into());
        }
    }
    position
}

/// Stage and micro-batch bounds, and stage-to-device mapping.
fn check_devices(r: &mut Report<'_>, placement: &Placement, cfg: &ParallelConfig) -> Vec<bool> {
    let sched = r.sched;
    let mut ok = vec![true; sched.tasks.len()];
    for (id, t) in sched.tasks.iter().enumerate() {
        let msg = match (t.stage, t.microbatch) {
            _ if t.device >= placement.num_devices => Some(format!("device {} out of range", t.device)),
            (Some(s), _) if s >= placement.num_stages() => Some(format!("stage {s} out of range")),
            (_, Some(m)) if m >= cfg.microbatches => Some(format!("micro-batch {m} out of range")),
            (Some(s), _) if placement.device_of(s) != t.device => Some(format!(
                "stage {s} belongs on device {}, found on {}",
                placement.device_of(s),
                t.device
            )),
            _ => None,
        };
        if let Some(msg) = msg {
            ok[id] = false;
            r.push(ViolationKind::DeviceMismatch, &[id], msg);
        }
    }
    ok
}

fn expected_recompute(sched: &Schedule, placement: &Placement, cfg: &ParallelConfig, stage: usize) -> bool {
    sched.variant.decouples_weight_grad()
        && cfg.recompute == Recompute::Full
        && cfg.stages_per_device > 1
        && !placement.is_last_mapped(stage)
}

/// Exactly one of each required task; recompute tasks where expected and nowhere else.
fn check_counts(r: &mut Report<'_>, placement: &Placement, cfg: &ParallelConfig) {
    let sched = r.sched;
    let stages = placement.num_stages();
    let b = cfg.microbatches;
    let mut seen: HashMap<TaskKey, Vec<TaskId>> = HashMap::new();
    for (id, t) in sched.tasks.iter().enumerate() {
        let mut key = t.key();
        // identity of a pipeline task is (kind, stage, micro-batch)
        if t.kind.is_pipeline() {
            key.unit = 0;
            key.device = 0;
        }
        seen.entry(key).or_default().push(id);
    }
    let pipeline_key = |kind, s, m| TaskKey {
        kind,
        stage: Some(s),
        microbatch: Some(m),
        unit: 0,
        device: 0,
        occurrence: 0,
    };

    let decoupled = sched.variant.decouples_weight_grad();
    for s in 0..stages {
        let wants_r = expected_recompute(sched, placement, cfg, s);
        for m in 0..b {
            for kind in [TaskKind::F, TaskKind::B, TaskKind::W] {
                let want = kind != TaskKind::W || decoupled;
                let key = pipeline_key(kind, s, m);
                match (want, seen.get(&key).map_or(0, Vec::len)) {
                    (true, 0) => r.push_keys(ViolationKind::MissingTask, vec![key], "required task absent".into()),
                    (true, 1) | (false, 0) => {}
                    (true, _) => {
                        let ids = seen[&key].clone();
                        r.push(ViolationKind::DuplicateTask, &ids, format!("appears {} times", ids.len()));
                    }
                    (false, _) => {
                        let ids = seen[&key].clone();
                        r.push(ViolationKind::DuplicateTask, &ids, format!("{} fuses W into B", sched.variant));
                    }
                }
            }
            let key = pipeline_key(TaskKind::R, s, m);
            let n = seen.get(&key).map_or(0, Vec::len);
            let want = usize::from(wants_r);
            if n != want {
                let ids = seen.get(&key).cloned().unwrap_or_default();
                let msg = format!("expected {want} recompute task(s), found {n}");
                if ids.is_empty() {
                    r.push_keys(ViolationKind::RecomputeCount, vec![key], msg);
                } else {
                    r.push(ViolationKind::RecomputeCount, &ids, msg);
                }
            }
        }
    }

    // collectives and the optimizer step
    let units = if sched.variant.is_sharded() { b.div_ceil(sched.unit_size.max(1)) } else { 1 };
    let last_unit = units - 1;
    let mut required: Vec<TaskKey> = Vec::new();
    if sched.variant.is_sharded() {
        for s in 0..stages {
            let device = placement.device_of(s);
            for unit in 0..units {
                for (kind, occurrence) in [(TaskKind::AgParam, 0), (TaskKind::AgParam, 1), (TaskKind::RsGrad, 0)] {
                    required.push(TaskKey {
                        kind,
                        stage: Some(s),
                        microbatch: None,
                        unit,
                        device,
                        occurrence,
                    });
                }
            }
        }
    }
    let device_kinds: &[TaskKind] = match (sched.variant.is_sharded(), cfg.hybrid_mode) {
        (false, _) => &[TaskKind::Opt],
        (true, HybridMode::DpOuter) => &[TaskKind::ArGrad, TaskKind::Opt],
        (true, HybridMode::Zero1Outer) => &[TaskKind::RsGradInter, TaskKind::Opt, TaskKind::AgParamInter],
    };
    for device in 0..placement.num_devices {
        for &kind in device_kinds {
            required.push(TaskKey {
                kind,
                stage: None,
                microbatch: None,
                unit: last_unit,
                device,
                occurrence: 0,
            });
        }
    }
    for key in &required {
        match seen.get(key).map_or(0, Vec::len) {
            0 => r.push_keys(ViolationKind::MissingTask, vec![*key], "required collective absent".into()),
            1 => {}
            n => {
                let ids = seen[key].clone();
                r.push(ViolationKind::DuplicateTask, &ids, format!("appears {n} times"));
            }
        }
    }
    let required: std::collections::HashSet<_> = required.into_iter().collect();
    let mut extra: Vec<_> = seen
        .iter()
        .filter(|(k, _)| !k.kind.is_pipeline() && !required.contains(*k))
        .flat_map(|(_, ids)| ids.iter().copied())
        .collect();
    extra.sort_unstable();
    for id in extra {
        r.push(ViolationKind::DuplicateTask, &[id], "collective not expected in this schedule".into());
    }
}

/// Pipeline tasks carry the unit of their micro-batch, and a device never
/// returns to an earlier unit once it has started a later one.
fn check_units(r: &mut Report<'_>, in_bounds: &[bool]) {
    let sched = r.sched;
    let unit_size = sched.unit_size.max(1);
    for ids in &sched.per_device {
        let mut latest: Option<(usize, TaskId)> = None;
        for &id in ids {
            let Some(t) = sched.tasks.get(id) else { continue };
            if !t.kind.is_pipeline() || !in_bounds[id] {
                continue;
            }
            let m = t.microbatch.unwrap_or(0);
            if t.unit != m / unit_size {
                r.push(
                    ViolationKind::UnitLeak,
                    &[id],
                    format!("micro-batch {m} belongs to unit {}, task says {}", m / unit_size, t.unit),
                );
            }
            match latest {
                Some((u, prev)) if t.unit < u => r.push(
                    ViolationKind::UnitLeak,
                    &[id, prev],
                    format!("unit {} task runs after unit {u} has started", t.unit),
                ),
                Some((u, _)) if t.unit == u => {}
                _ => latest = Some((t.unit, id)),
            }
        }
    }
}

/// Dependency order: same-device pairs by position, then a virtual-time
/// topological pass over all device lists to catch cross-device cycles.
fn check_order(r: &mut Report<'_>, placement: &Placement, position: &[Option<(usize, usize)>]) {
    let sched = r.sched;
    let n = sched.tasks.len();
    let mut edges = identity_edges(&sched.tasks, placement.num_stages(), sched.unit_size);
    edges.extend(sched.edges.iter().copied().filter(|&(a, b)| a < n && b < n && a != b));
    edges.sort_unstable();
    edges.dedup();

    let mut same_device_bad = false;
    for &(a, b) in &edges {
        if let (Some((da, ia)), Some((db, ib))) = (position[a], position[b]) {
            if da == db && ia > ib {
                same_device_bad = true;
                r.push(
                    ViolationKind::DepOrder,
                    &[a, b],
                    format!("{} must precede {} but comes later on device {da}", sched.tasks[a].key(), sched.tasks[b].key()),
                );
            }
        }
    }

    let mut preds: Vec<Vec<TaskId>> = vec![Vec::new(); n];
    let mut succs: Vec<Vec<TaskId>> = vec![Vec::new(); n];
    for &(a, b) in &edges {
        if position[a].is_some() && position[b].is_some() {
            preds[b].push(a);
            succs[a].push(b);
        }
    }
    let mut waiting: Vec<usize> = preds.iter().map(Vec::len).collect();
    let lists: Vec<&Vec<TaskId>> = sched.per_device.iter().collect();
    let mut ptr = vec![0usize; lists.len()];
    let mut done = vec![false; n];
    let mut progress = true;
    while progress {
        progress = false;
        for d in 0..lists.len() {
            while let Some(&id) = lists[d].get(ptr[d]) {
                if id >= n || position[id] != Some((d, ptr[d])) {
                    // unknown or duplicate listing, already reported
                    ptr[d] += 1;
                    continue;
                }
                if waiting[id] > 0 {
                    break;
                }
                done[id] = true;
                for &s in &succs[id] {
                    waiting[s] -= 1;
                }
                ptr[d] += 1;
                progress = true;
            }
        }
    }
    if same_device_bad {
        return;
    }
    for d in 0..lists.len() {
        if let Some(&head) = lists[d].get(ptr[d]) {
            let blocker = preds[head].iter().copied().find(|&p| !done[p]);
            let mut ids = vec![head];
            ids.extend(blocker);
            let msg = match blocker {
                Some(p) => format!(
                    "device {d} is stuck at {}: waits on {} which can never run first",
                    sched.tasks[head].key(),
                    sched.tasks[p].key()
                ),
                None => format!("device {d} is stuck at {}", sched.tasks[head].key()),
            };
            r.push(ViolationKind::DepOrder, &ids, msg);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_placement, ModelSpec};
    use crate::schedule::{gen_zeropp, generate, Variant};

    fn setup(p: usize, v: usize, b: usize, u: usize) -> (Schedule, Placement, ParallelConfig) {
        let cfg = ParallelConfig::new(p, v, b, u);
        let model = ModelSpec::uniform(p * v);
        let pl = make_placement(&cfg, &model);
        (gen_zeropp(&model, &cfg, &pl), pl, cfg)
    }

    fn kinds(v: &[Violation]) -> Vec<ViolationKind> {
        v.iter().map(|x| x.kind).collect()
    }

    #[test]
    fn generated_schedule_is_clean() {
        let (s, pl, cfg) = setup(4, 2, 8, 4);
        assert_eq!(validate(&s, &pl, &cfg), []);
    }

    #[test]
    fn every_variant_validates() {
        let cfg = ParallelConfig::new(4, 2, 8, 4);
        let model = ModelSpec::uniform(8);
        let pl = make_placement(&cfg, &model);
        for v in [Variant::Zeropp, Variant::Bfpp, Variant::Interleaved1F1B] {
            let s = generate(v, &model, &cfg, &pl).unwrap();
            assert_eq!(validate(&s, &pl, &cfg), [], "{v}");
        }
    }

    #[test]
    fn swapped_backward_is_dep_order() {
        let (mut s, pl, cfg) = setup(2, 1, 1, 1);
        let b0 = s.find(TaskKind::B, 0, 0).unwrap();
        // put B(0,0) first on device 0
        let list = &mut s.per_device[0];
        list.retain(|&x| x != b0);
        list.insert(0, b0);
        let v = validate(&s, &pl, &cfg);
        assert!(kinds(&v).contains(&ViolationKind::DepOrder), "{v:?}");
        let named: Vec<TaskKey> = v.iter().flat_map(|x| x.tasks.clone()).collect();
        assert!(named.contains(&s.tasks[b0].key()));
    }

    #[test]
    fn deleting_w_is_missing_task() {
        let (mut s, pl, cfg) = setup(2, 1, 2, 2);
        let w = s.find(TaskKind::W, 0, 1).unwrap();
        s.per_device[0].retain(|&x| x != w);
        let v = validate(&s, &pl, &cfg);
        assert!(kinds(&v).contains(&ViolationKind::MissingTask), "{v:?}");
    }

    #[test]
    fn wrong_device_is_reported() {
        let (mut s, pl, cfg) = setup(2, 1, 1, 1);
        let f = s.find(TaskKind::F, 1, 0).unwrap();
        s.tasks[f].device = 0;
        for l in &mut s.per_device {
            l.retain(|&x| x != f);
        }
        s.per_device[0].push(f);
        let v = validate(&s, &pl, &cfg);
        assert!(kinds(&v).contains(&ViolationKind::DeviceMismatch), "{v:?}");
    }

    #[test]
    fn unit_regression_is_a_leak() {
        let (mut s, pl, cfg) = setup(2, 1, 4, 2);
        // move W(1,0) of unit 0 to the end of device 1
        let w = s.find(TaskKind::W, 1, 0).unwrap();
        let list = &mut s.per_device[1];
        list.retain(|&x| x != w);
        let at = list.len() - 2;
        list.insert(at, w);
        let v = validate(&s, &pl, &cfg);
        assert!(kinds(&v).contains(&ViolationKind::UnitLeak), "{v:?}");
    }

    #[test]
    fn missing_recompute_is_counted() {
        let (s, pl, mut cfg) = setup(2, 2, 2, 2);
        cfg.recompute = Recompute::Full;
        let v = validate(&s, &pl, &cfg);
        assert!(kinds(&v).iter().all(|&k| k == ViolationKind::RecomputeCount));
        assert_eq!(v.len(), 2 * 2);
    }

    #[test]
    fn every_violation_names_a_task() {
        let (mut s, pl, cfg) = setup(2, 2, 4, 2);
        s.per_device[0].reverse();
        let v = validate(&s, &pl, &cfg);
        assert!(!v.is_empty());
        assert!(v.iter().all(|x| !x.tasks.is_empty()));
    }
}
