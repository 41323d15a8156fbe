//! Exhaustive search over unit size, stages per device, recompute and hybrid
//! mode under a per-device memory cap.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::model::{Config, HybridMode, Recompute};
use crate::schedule::{gen_zeropp, Variant};
use crate::sim::simulate;
use crate::validate::validate;

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("search space is empty")]
    Empty,
    #[error(
        "no candidate fits in {cap} bytes; the smallest footprint is {} bytes (U={}, V={}, recompute={}, mode={})",
        .min.peak_mem, .min.unit_size, .min.stages_per_device, .min.recompute, .min.mode
    )]
    Infeasible { cap: f64, min: Box<PlanRow> },
}

#[derive(Debug, Clone)]
pub struct SearchSpace {
    /// Fixed model, P, B, b, D and costs; its U, V, recompute and mode are replaced per candidate.
    pub base: Config,
    pub unit_sizes: Vec<usize>,
    pub stages_per_device: Vec<usize>,
    pub recompute: Vec<Recompute>,
    pub modes: Vec<HybridMode>,
    pub memory_cap: f64,
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n.is_multiple_of(*d)).collect()
}

impl SearchSpace {
    /// U over the divisors of B, V over the divisors of L/P, both recompute
    /// settings and both hybrid modes.
    pub fn full(base: Config, memory_cap: f64) -> Self {
        let b = base.parallel.microbatches;
        let per_device = base.model.num_layers / base.parallel.pp_size;
        SearchSpace {
            unit_sizes: divisors(b),
            stages_per_device: divisors(per_device),
            recompute: vec![Recompute::None, Recompute::Full],
            modes: vec![HybridMode::DpOuter, HybridMode::Zero1Outer],
            memory_cap,
            base,
        }
    }

    pub fn candidates(&self) -> Vec<Config> {
        let mut out = Vec::new();
        for &u in &self.unit_sizes {
            for &v in &self.stages_per_device {
                for &r in &self.recompute {
                    for &mode in &self.modes {
                        let mut c = self.base.clone();
                        c.parallel.unit_size = u;
                        c.parallel.stages_per_device = v;
                        c.parallel.recompute = r;
                        c.parallel.hybrid_mode = mode;
                        out.push(c);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanRow {
    /// Position in the candidate grid.
    pub index: usize,
    pub unit_size: usize,
    pub stages_per_device: usize,
    pub recompute: Recompute,
    pub mode: HybridMode,
    /// Simulated iteration time; infinite when the candidate could not run.
    pub time: f64,
    /// Largest per-device peak.
    pub peak_mem: f64,
    pub feasible: bool,
    /// Why the candidate could not run, if it could not.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanResult {
    pub best: PlanRow,
    pub memory_cap: f64,
    /// Every candidate, feasible ones first, then by time, peak memory, U.
    pub ranked: Vec<PlanRow>,
}

fn evaluate_one(index: usize, c: &Config) -> PlanRow {
    let p = &c.parallel;
    let mut row = PlanRow {
        index,
        unit_size: p.unit_size,
        stages_per_device: p.stages_per_device,
        recompute: p.recompute,
        mode: p.hybrid_mode,
        time: f64::INFINITY,
        peak_mem: f64::INFINITY,
        feasible: false,
        error: None,
    };
    if let Err(e) = c.validate() {
        row.error = Some(e.to_string());
        return row;
    }
    let placement = c.placement();
    let sched = gen_zeropp(&c.model, p, &placement);
    debug_assert_eq!(sched.variant, Variant::Zeropp);
    let violations = validate(&sched, &placement, p);
    if let Some(v) = violations.first() {
        row.error = Some(format!("invalid schedule: {v}"));
        return row;
    }
    match simulate(&sched, &c.model, p, &placement, &c.costs) {
        Ok(r) => {
            row.time = r.makespan;
            row.peak_mem = r.peak_mem.iter().map(|m| m.total).fold(0.0, f64::max);
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Simulates every candidate. The result does not depend on the memory cap.
pub fn evaluate(space: &SearchSpace) -> Vec<PlanRow> {
    let candidates = space.candidates();
    candidates
        .par_iter()
        .enumerate()
        .map(|(i, c)| evaluate_one(i, c))
        .collect()
}

fn order(a: &PlanRow, b: &PlanRow) -> Ordering {
    b.feasible
        .cmp(&a.feasible)
        .then(a.time.total_cmp(&b.time))
        .then(a.peak_mem.total_cmp(&b.peak_mem))
        .then(a.unit_size.cmp(&b.unit_size))
        .then(a.index.cmp(&b.index))
}

/// Marks rows against `cap` and ranks them.
pub fn rank(rows: &[PlanRow], cap: f64) -> Result<PlanResult, PlanError> {
    if rows.is_empty() {
        return Err(PlanError::Empty);
    }
    let mut ranked: Vec<PlanRow> = rows
        .iter()
        .cloned()
        .map(|mut r| {
            r.feasible = r.error.is_none() && r.peak_mem <= cap;
            r
        })
        .collect();
    ranked.sort_by(order);
    if !ranked[0].feasible {
        let min = ranked
            .iter()
            .filter(|r| r.error.is_none())
            .min_by(|a, b| a.peak_mem.total_cmp(&b.peak_mem).then(a.index.cmp(&b.index)))
            .unwrap_or(&ranked[0])
            .clone();
        return Err(PlanError::Infeasible { cap, min: Box::new(min) });
    }
    Ok(PlanResult {
        best: ranked[0].clone(),
        memory_cap: cap,
        ranked,
    })
}

/// Evaluates and ranks the whole space.
pub fn search(space: &SearchSpace) -> Result<PlanResult, PlanError> {
    rank(&evaluate(space), space.memory_cap)
}

/// Ranked CSV of every candidate plus a one-paragraph summary naming the winner.
pub fn report(plan: &PlanResult) -> (String, String) {
    let mut csv = String::from("U,V,recompute,mode,time,peak_mem,feasible\n");
    for r in &plan.ranked {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.unit_size, r.stages_per_device, r.recompute, r.mode, r.time, r.peak_mem, r.feasible
        );
    }
    let b = &plan.best;
    let feasible = plan.ranked.iter().filter(|r| r.feasible).count();
    let summary = format!(
        "best: U={} V={} recompute={} mode={} time={} peak_mem={} ({} of {} candidates fit under {})",
        b.unit_size,
        b.stages_per_device,
        b.recompute,
        b.mode,
        b.time,
        b.peak_mem,
        feasible,
        plan.ranked.len(),
        plan.memory_cap
    );
    (csv, summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CommCostModel, ModelSpec, ParallelConfig};

    fn base(p: usize, b: usize, layers: usize) -> Config {
        let mut par = ParallelConfig::new(p, 1, b, b);
        par.dp_size = 2;
        Config::new(ModelSpec::uniform(layers), par, CommCostModel::free()).unwrap()
    }

    #[test]
    fn grid_is_exhaustive() {
        let space = SearchSpace::full(base(2, 8, 8), f64::INFINITY);
        // U ∈ {1,2,4,8}, V ∈ {1,2,4}, 2 recompute, 2 modes
        let plan = search(&space).unwrap();
        assert_eq!(plan.ranked.len(), 4 * 3 * 2 * 2);
    }

    #[test]
    fn unlimited_memory_prefers_bubble_free_units() {
        let space = SearchSpace::full(base(2, 8, 8), f64::INFINITY);
        let plan = search(&space).unwrap();
        assert!(plan.best.unit_size >= 3, "{:?}", plan.best);
    }

    #[test]
    fn cap_below_floor_is_infeasible() {
        let space = SearchSpace::full(base(2, 8, 8), 0.5);
        match search(&space) {
            Err(PlanError::Infeasible { min, .. }) => assert!(min.peak_mem > 0.5),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn tighter_cap_never_helps() {
        let space = SearchSpace::full(base(2, 8, 8), f64::INFINITY);
        let rows = evaluate(&space);
        let mut caps: Vec<f64> = rows.iter().map(|r| r.peak_mem).collect();
        caps.sort_by(f64::total_cmp);
        caps.dedup();
        let mut prev = f64::INFINITY;
        for cap in caps {
            let t = rank(&rows, cap).unwrap().best.time;
            assert!(t <= prev);
            prev = t;
        }
    }

    #[test]
    fn ties_go_to_lower_memory() {
        let row = |index, time, peak_mem| PlanRow {
            index,
            unit_size: 4,
            stages_per_device: 1,
            recompute: Recompute::None,
            mode: HybridMode::DpOuter,
            time,
            peak_mem,
            feasible: true,
            error: None,
        };
        let plan = rank(&[row(0, 5.0, 9.0), row(1, 5.0, 3.0)], 10.0).unwrap();
        assert_eq!(plan.best.index, 1);
    }

    #[test]
    fn single_candidate_report() {
        let mut space = SearchSpace::full(base(2, 4, 2), f64::INFINITY);
        space.unit_sizes = vec![4];
        space.stages_per_device = vec![1];
        space.recompute = vec![Recompute::None];
        space.modes = vec![HybridMode::DpOuter];
        let plan = search(&space).unwrap();
        let (csv, summary) = report(&plan);
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.lines().nth(1).unwrap().starts_with("4,1,NONE,DP_OUTER,"));
        assert!(summary.contains("U=4 V=1"));
    }
}
