//! Randomized round trips between the generators and the validator.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::model::{make_placement, HybridMode, ModelSpec, ParallelConfig, Recompute};
use crate::schedule::{generate, Schedule, TaskId, Variant};
use crate::validate::validate;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FuzzFailure {
    pub trial: usize,
    pub seed: u64,
    pub variant: Variant,
    pub config: ParallelConfig,
    pub num_layers: usize,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct FuzzSummary {
    pub trials: usize,
    /// Generated schedules that validated clean.
    pub valid: usize,
    /// Mutations that inverted a dependency edge.
    pub mutations: usize,
    /// Of those, how many the validator rejected.
    pub rejected: usize,
    /// Trials where no edge of the sampled schedule could be inverted by reordering.
    pub unmutated: usize,
    pub failures: Vec<FuzzFailure>,
}

impl FuzzSummary {
    pub fn ok(&self) -> bool {
        self.failures.is_empty() && self.valid == self.trials && self.rejected == self.mutations
    }
}

/// A random configuration within P ≤ 8, V ≤ 4, B ≤ 32.
pub fn random_config(rng: &mut impl Rng) -> (Variant, ModelSpec, ParallelConfig) {
    let p = rng.gen_range(1..=8);
    let variant = *Variant::ALL.choose(rng).expect("nonempty");
    let v = match variant {
        Variant::Gpipe | Variant::OneFOneB => 1,
        _ => rng.gen_range(1..=4),
    };
    let unit = rng.gen_range(1..=32);
    let mut b = unit * rng.gen_range(1..=32 / unit);
    if variant == Variant::Interleaved1F1B && v > 1 {
        // interleaving takes micro-batches P at a time
        b = p * rng.gen_range(1..=32 / p);
    }
    let unit = if b % unit == 0 { unit } else { b };
    let layers = p * v * rng.gen_range(1..=2);
    let mut cfg = ParallelConfig::new(p, v, b, unit);
    cfg.dp_size = rng.gen_range(1..=8);
    cfg.inter_node_dp = rng.gen_range(1..=4);
    cfg.hybrid_mode = if rng.gen_bool(0.5) { HybridMode::DpOuter } else { HybridMode::Zero1Outer };
    cfg.recompute = if rng.gen_bool(0.5) { Recompute::Full } else { Recompute::None };
    (variant, ModelSpec::uniform(layers), cfg)
}

fn precedence_graph(sched: &Schedule) -> Vec<Vec<TaskId>> {
    let mut succ = vec![Vec::new(); sched.tasks.len()];
    for &(a, b) in &sched.edges {
        succ[a].push(b);
    }
    for ids in &sched.per_device {
        for w in ids.windows(2) {
            succ[w[0]].push(w[1]);
        }
    }
    succ
}

fn reachable_from(succ: &[Vec<TaskId>], start: TaskId) -> Vec<bool> {
    let mut seen = vec![false; succ.len()];
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(x) = stack.pop() {
        for &y in &succ[x] {
            if !seen[y] {
                seen[y] = true;
                stack.push(y);
            }
        }
    }
    seen
}

/// Reorders one device list so that `b` is forced to run before `a`, where
/// `(a, b)` is an edge of `sched`. Returns `None` when no single move achieves
/// that.
pub fn invert_edge(sched: &Schedule, a: TaskId, b: TaskId) -> Option<Schedule> {
    let da = sched.tasks[a].device;
    let db = sched.tasks[b].device;
    let pos = |d: usize, id: TaskId| sched.per_device[d].iter().position(|&x| x == id);
    let mut out = sched.clone();
    if da == db {
        let list = &mut out.per_device[da];
        let pa = pos(da, a)?;
        list.retain(|&x| x != b);
        list.insert(pa, b);
        return Some(out);
    }
    let succ = precedence_graph(sched);
    let pa = pos(da, a)?;
    let from_b = reachable_from(&succ, b);
    if let Some(x) = sched.per_device[da][pa + 1..].iter().copied().find(|&x| from_b[x]) {
        let list = &mut out.per_device[da];
        list.retain(|&y| y != a);
        let px = list.iter().position(|&y| y == x)?;
        list.insert(px + 1, a);
        return Some(out);
    }
    let pb = pos(db, b)?;
    let ancestor_of_a = |y: TaskId| reachable_from(&succ, y)[a];
    if let Some(y) = sched.per_device[db][..pb].iter().rev().copied().find(|&y| ancestor_of_a(y)) {
        let list = &mut out.per_device[db];
        list.retain(|&z| z != b);
        let py = list.iter().position(|&z| z == y)?;
        list.insert(py, b);
        return Some(out);
    }
    None
}

struct Trial {
    valid: bool,
    mutated: bool,
    rejected: bool,
    failure: Option<FuzzFailure>,
}

fn run_trial(seed: u64, trial: usize) -> Trial {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    let (variant, model, cfg) = random_config(&mut rng);
    let placement = make_placement(&cfg, &model);
    let fail = |detail: String| FuzzFailure {
        trial,
        seed,
        variant,
        config: cfg.clone(),
        num_layers: model.num_layers,
        detail,
    };
    let sched = match generate(variant, &model, &cfg, &placement) {
        Ok(s) => s,
        Err(e) => {
            return Trial {
                valid: false,
                mutated: false,
                rejected: false,
                failure: Some(fail(format!("generation failed: {e}"))),
            }
        }
    };
    let violations = validate(&sched, &placement, &cfg);
    if let Some(v) = violations.first() {
        return Trial {
            valid: false,
            mutated: false,
            rejected: false,
            failure: Some(fail(format!("{} violation(s), first: {v}", violations.len()))),
        };
    }
    let mut edges = sched.edges.clone();
    edges.shuffle(&mut rng);
    for &(a, b) in edges.iter().take(32) {
        let Some(mutant) = invert_edge(&sched, a, b) else { continue };
        let rejected = !validate(&mutant, &placement, &cfg).is_empty();
        let failure = (!rejected).then(|| {
            fail(format!(
                "inverting {} -> {} went undetected",
                sched.tasks[a].key(),
                sched.tasks[b].key()
            ))
        });
        return Trial {
            valid: true,
            mutated: true,
            rejected,
            failure,
        };
    }
    Trial {
        valid: true,
        mutated: false,
        rejected: false,
        failure: None,
    }
}

/// Samples `trials` configurations, checks that each generated schedule
/// validates clean and that one random edge inversion per schedule is
/// rejected. Trials run in parallel; the summary depends only on `seed`.
pub fn fuzz_check(seed: u64, trials: usize) -> FuzzSummary {
    let results: Vec<Trial> = (0..trials).into_par_iter().map(|t| run_trial(seed, t)).collect();
    let mut summary = FuzzSummary {
        trials,
        ..Default::default()
    };
    for r in results {
        summary.valid += usize::from(r.valid);
        summary.mutations += usize::from(r.mutated);
        summary.rejected += usize::from(r.rejected);
        summary.unmutated += usize::from(r.valid && !r.mutated);
        summary.failures.extend(r.failure);
    }
    summary
}
