//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zeropp::cost::{self, Method};
use zeropp::fuzz::fuzz_check;
use zeropp::model::{make_placement, CommCostModel, Config, HybridMode, ModelSpec, ParallelConfig, Recompute};
use zeropp::planner::{evaluate, rank, report, SearchSpace};
use zeropp::schedule::{generate, Schedule, TaskKind, Variant};
use zeropp::sim::{bubble_count, bubble_ratio, simulate, SimResult};

type Outcome = Result<String, String>;

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

struct Run {
    sched: Schedule,
    result: SimResult,
}

fn run(variant: Variant, model: &ModelSpec, cfg: &ParallelConfig, costs: &CommCostModel) -> Run {
    let placement = make_placement(cfg, model);
    let sched = generate(variant, model, cfg, &placement).expect("generates");
    let result = simulate(&sched, model, cfg, &placement, costs).expect("simulates");
    Run { sched, result }
}

/// One layer per stage, unit costs, unit memory: one stage-task is one slot.
fn unit_setup(p: usize, v: usize, b: usize, u: usize, d: usize) -> (ModelSpec, ParallelConfig) {
    let mut cfg = ParallelConfig::new(p, v, b, u);
    cfg.dp_size = d;
    (ModelSpec::uniform(p * v), cfg)
}

fn sweep() -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for p in [2, 4, 8] {
        for v in [1, 2] {
            for u in 1..=2 * p + 2 {
                out.push((p, v, u));
            }
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut checked = 0;
    for (p, v, u) in sweep() {
        let b = 4 * u;
        let (model, cfg) = unit_setup(p, v, b, u, 1);
        let r = run(Variant::Zeropp, &model, &cfg, &CommCostModel::free()).result;
        let slots = bubble_count(&r, 1.0).map_err(|e| e.to_string())?;
        checked += 1;
        if u < 2 * p - 1 {
            let oracle = (b * (2 * p - 1 - u)) as f64 / u as f64;
            let worst = slots
                .per_device
                .iter()
                .copied()
                .max_by(|a, b| (a - oracle).abs().total_cmp(&(b - oracle).abs()))
                .unwrap_or(0.0);
            if (worst - oracle).abs() > p as f64 {
                failures.push(format!("P={p} V={v} U={u}: {worst} slots vs {oracle}±{p}"));
            }
        } else {
            for (d, ratio) in bubble_ratio(&r).into_iter().enumerate() {
                if ratio > 0.05 {
                    failures.push(format!("P={p} V={v} U={u} d{d}: ratio {ratio:.4} > 0.05"));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 10.0 {
        failures.push(format!("runtime {secs:.2}s ≥ 10s"));
    }
    if failures.is_empty() {
        Ok(format!("{checked} sweep points within tolerance in {secs:.2}s"))
    } else {
        Err(format!(
            "{} of {checked} points out of tolerance ({secs:.2}s): {}",
            failures.len(),
            failures.join("; ")
        ))
    }
}

fn criterion_2() -> Outcome {
    let free = CommCostModel::free();
    let (p, v, b) = (4usize, 2usize, 8usize);
    let (model, cfg) = unit_setup(p, 1, b, b, 1);
    let gpipe = bubble_ratio(&run(Variant::Gpipe, &model, &cfg, &free).result);
    let (model, cfg) = unit_setup(p, v, b, b, 1);
    let inter = bubble_ratio(&run(Variant::Interleaved1F1B, &model, &cfg, &free).result);
    let gpipe_oracle = (p - 1) as f64 / b as f64;
    let inter_oracle = (p - 1) as f64 / (v * b) as f64;
    let mut bad = Vec::new();
    if gpipe.iter().any(|&x| x != gpipe_oracle) {
        bad.push(format!("GPipe {gpipe:?} vs {gpipe_oracle}"));
    }
    if inter.iter().any(|&x| x != inter_oracle) {
        bad.push(format!("interleaved {inter:?} vs {inter_oracle}"));
    }
    let lma = 7.0;
    let mut m = ModelSpec::uniform(8);
    m.act_mem_per_layer_per_microbatch = lma / 8.0;
    let c = ParallelConfig::new(p, v, b, b);
    let z = cost::table2_row(Method::Zeropp, &m, &c).map_err(|e| e.to_string())?;
    let zr = cost::table2_row(Method::ZeroppRecomp, &m, &c).map_err(|e| e.to_string())?;
    let close = |a: f64, b: f64| (a - b).abs() <= f64::EPSILON * b.abs().max(1.0) * 4.0;
    if !close(z.activation_mem, 1.75 * lma) {
        bad.push(format!("ZeroPP activation {} vs {}", z.activation_mem, 1.75 * lma));
    }
    if !close(zr.activation_mem, 0.875 * lma) {
        bad.push(format!("ZeroPP+recompute activation {} vs {}", zr.activation_mem, 0.875 * lma));
    }
    if bad.is_empty() {
        Ok(format!(
            "GPipe {gpipe_oracle}, interleaved {inter_oracle}, activation rows 1.75·LM_a and 0.875·LM_a"
        ))
    } else {
        Err(bad.join("; "))
    }
}

fn criterion_3() -> Outcome {
    let free = CommCostModel::free();
    let d = 8;
    let mut bad = Vec::new();
    for (p, v, u) in sweep() {
        let b = 4 * u;
        let (model, cfg) = unit_setup(p, v, b, u, d);
        let r = run(Variant::Zeropp, &model, &cfg, &free).result;
        let l = (p * v) as f64;
        let (pf, df, vf) = (p as f64, d as f64, v as f64);
        let weight = l * (1.0 / (pf * df) + 1.0 / (pf * vf));
        let act = b.min(u) as f64 * l / pf;
        for (dev, peak) in r.peak_mem.iter().enumerate() {
            if peak.components.weights != weight || peak.components.activations != act {
                bad.push(format!(
                    "P={p} V={v} U={u} d{dev}: weights {} vs {weight}, activations {} vs {act}",
                    peak.components.weights, peak.components.activations
                ));
            }
        }
    }
    let act_peak = |variant, b: usize, u: usize| {
        let (model, cfg) = unit_setup(4, 2, b, u, d);
        let r = run(variant, &model, &cfg, &free).result;
        r.peak_mem.iter().map(|m| m.components.activations).fold(0.0, f64::max)
    };
    let u = 4;
    let z: Vec<f64> = [u, 2 * u, 4 * u].iter().map(|&b| act_peak(Variant::Zeropp, b, u)).collect();
    if z.iter().any(|&x| x != z[0]) {
        bad.push(format!("ZeroPP activation peak varies with B: {z:?}"));
    }
    let bf: Vec<f64> = [u, 2 * u, 4 * u].iter().map(|&b| act_peak(Variant::Bfpp, b, b)).collect();
    for (i, k) in [(1, 2.0), (2, 4.0)] {
        let ratio = bf[i] / bf[0];
        if (ratio - k).abs() > 0.01 * k {
            bad.push(format!("BFPP activation ratio {ratio} for {k}×B"));
        }
    }
    if bad.is_empty() {
        Ok(format!("weights and activations exact over the sweep; ZeroPP {z:?} flat; BFPP {bf:?} linear"))
    } else {
        Err(format!("{} mismatches: {}", bad.len(), bad.join("; ")))
    }
}

fn criterion_4() -> Outcome {
    let mut bad = Vec::new();
    // traffic per block against 36·B·h²/U
    let (p, v, b, u, d, h) = (4usize, 2usize, 8usize, 4usize, 8usize, 1024u64);
    let mut model = ModelSpec::uniform(p * v);
    model.hidden_size = h;
    model.seq_len = 1024;
    model.weight_mem_per_layer = ModelSpec::default_weight_mem(h, 2.0);
    model.bytes_per_element = 2.0;
    let mut cfg = ParallelConfig::new(p, v, b, u);
    cfg.dp_size = d;
    let r = run(Variant::Zeropp, &model, &cfg, &CommCostModel::free()).result;
    let oracle = 36.0 * b as f64 * (h * h) as f64 * 2.0 / u as f64;
    let layers_per_device = (model.num_layers / p) as f64;
    let mut worst: f64 = 0.0;
    for &intra in &r.comm_bytes_intra {
        let per_block = intra / layers_per_device;
        let err = (per_block - oracle).abs() / oracle;
        worst = worst.max(err);
    }
    if worst > 0.15 {
        bad.push(format!("intra volume off by {:.1}%", worst * 100.0));
    }

    // crossover sign agreement
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut agree = 0;
    for _ in 0..200 {
        let mut m = ModelSpec::uniform(1);
        m.hidden_size = rng.gen_range(1..=16384);
        m.seq_len = rng.gen_range(1..=8192);
        m.bytes_per_element = 2.0;
        let u = rng.gen_range(1..=64);
        let mut c = ParallelConfig::new(1, 1, u * rng.gen_range(1..=4), u);
        c.microbatch_samples = rng.gen_range(1..=16);
        let tp = 8.0 * (c.microbatches * c.microbatch_samples) as f64 * (m.seq_len * m.hidden_size) as f64 * 2.0;
        let zp = 36.0 * c.microbatches as f64 * (m.hidden_size * m.hidden_size) as f64 * 2.0 / u as f64;
        if cost::crossover(&m, &c) == (tp - zp > 0.0) {
            agree += 1;
        }
    }
    if agree != 200 {
        bad.push(format!("crossover agreed on {agree}/200"));
    }

    // inter-node bytes by hybrid mode
    let mut cfg2 = cfg.clone();
    cfg2.inter_node_dp = 4;
    let dp = run(Variant::Zeropp, &model, &cfg2, &CommCostModel::free()).result;
    cfg2.hybrid_mode = HybridMode::Zero1Outer;
    let z1 = run(Variant::Zeropp, &model, &cfg2, &CommCostModel::free()).result;
    if dp.comm_bytes_inter != z1.comm_bytes_inter || dp.comm_bytes_inter.iter().any(|&x| x <= 0.0) {
        bad.push(format!("inter bytes {:?} vs {:?}", dp.comm_bytes_inter, z1.comm_bytes_inter));
    }
    if bad.is_empty() {
        Ok(format!(
            "intra volume within {:.1}%; crossover 200/200; inter bytes equal ({:e} per device)",
            worst * 100.0,
            dp.comm_bytes_inter[0]
        ))
    } else {
        Err(bad.join("; "))
    }
}

fn criterion_5() -> Outcome {
    let cfg = Config::load(config_path("gpt_6p2b.json")).map_err(|e| e.to_string())?;
    let batches: Vec<usize> = (1..=64).collect();
    let pts = cost::figure1_curve(&cfg.model, &batches);
    let slope = pts[0].tp_bytes / pts[0].global_batch as f64;
    let linear = pts.iter().all(|p| p.tp_bytes == slope * p.global_batch as f64);
    let constant = pts.iter().all(|p| p.zero3_bytes == pts[0].zero3_bytes);
    let ratios: Vec<f64> = pts.iter().map(|p| p.tp_bytes / p.zero3_bytes).collect();
    let increasing = ratios.windows(2).all(|w| w[1] > w[0]);
    let m = &cfg.model;
    // smallest G with 2·s·G > 9·h
    let crossover = (1..).find(|&g: &u64| 2 * m.seq_len * g > 9 * m.hidden_size).unwrap() as usize;
    let matches = cost::figure1_crossover(m) == crossover;
    if linear && constant && increasing && matches {
        Ok(format!("TP linear, ZeRO-3 constant, ratio increasing over G=1..64; crossover at G={crossover}"))
    } else {
        Err(format!(
            "linear={linear} constant={constant} increasing={increasing} crossover {} vs {crossover}",
            cost::figure1_crossover(m)
        ))
    }
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let seed = std::env::var("ZEROPP_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(1);
    let s = fuzz_check(seed, 500);
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "seed {seed}: {}/{} valid, {}/{} inversions rejected, {secs:.2}s",
        s.valid, s.trials, s.rejected, s.mutations
    );
    if s.valid == 500 && s.mutations == 500 && s.rejected == 500 && secs < 60.0 {
        Ok(detail)
    } else {
        let first: Vec<String> = s.failures.iter().take(3).map(|f| f.detail.clone()).collect();
        Err(format!("{detail}; {}", first.join("; ")))
    }
}

fn criterion_7() -> Outcome {
    let free = CommCostModel::free();
    // four layers per stage, so a stored stage input is smaller than the stage's activations
    let (_, mut cfg) = unit_setup(4, 2, 8, 8, 8);
    let model = ModelSpec::uniform(32);
    let base = run(Variant::Zeropp, &model, &cfg, &free);
    cfg.recompute = Recompute::Full;
    let rc = run(Variant::Zeropp, &model, &cfg, &free);
    let busy = |r: &Run| r.result.per_device_busy.iter().sum::<f64>();
    let r_cost: f64 = rc.sched.tasks.iter().filter(|t| t.kind == TaskKind::R).map(|t| t.cost).sum();
    let forward: f64 = rc.sched.tasks.iter().filter(|t| t.kind == TaskKind::F).map(|t| t.cost).sum();
    let v = cfg.stages_per_device as f64;
    let act = |r: &Run| r.result.peak_mem.iter().map(|m| m.components.activations).fold(0.0, f64::max);
    let mut bad = Vec::new();
    if busy(&rc) - busy(&base) != r_cost {
        bad.push(format!("busy grew by {} but R costs {r_cost}", busy(&rc) - busy(&base)));
    }
    if r_cost != (v - 1.0) / v * forward {
        bad.push(format!("R cost {r_cost} vs (V-1)/V·forward {}", (v - 1.0) / v * forward));
    }
    if act(&rc) >= act(&base) {
        bad.push(format!("activation peak {} not below {}", act(&rc), act(&base)));
    }
    let (model1, mut cfg1) = unit_setup(4, 1, 8, 8, 8);
    cfg1.recompute = Recompute::Full;
    let r1 = run(Variant::Zeropp, &model1, &cfg1, &free);
    if r1.sched.count(TaskKind::R) != 0 {
        bad.push("R tasks emitted with V=1".into());
    }
    if bad.is_empty() {
        Ok(format!(
            "+{r_cost} compute = R cost; activation peak {} -> {}; no R at V=1",
            act(&base),
            act(&rc)
        ))
    } else {
        Err(bad.join("; "))
    }
}

fn criterion_8() -> Outcome {
    let cfg = Config::load(config_path("gpt_14p6b.json")).map_err(|e| e.to_string())?;
    let p = &cfg.parallel;
    if (cfg.model.num_layers, cfg.model.hidden_size, cfg.model.seq_len, p.pp_size, p.microbatches, p.microbatch_samples)
        != (48, 5120, 1024, 4, 48, 4)
    {
        return Err("shipped 14.6B config does not match L=48 h=5120 s=1024 P=4 B=48 b=4".into());
    }
    let space = SearchSpace::full(cfg.clone(), f64::INFINITY);
    let grid = space.candidates().len();
    let rows = evaluate(&space);
    let mut peaks: Vec<f64> = rows.iter().filter(|r| r.error.is_none()).map(|r| r.peak_mem).collect();
    peaks.sort_by(f64::total_cmp);
    peaks.dedup();
    // decreasing caps: every distinct footprint, then one below the smallest
    let mut caps: Vec<f64> = peaks.iter().rev().copied().collect();
    caps.push(peaks[0] * 0.5);
    let mut times = Vec::new();
    for &cap in &caps {
        times.push(rank(&rows, cap).map_or(f64::INFINITY, |p| p.best.time));
    }
    // times listed by decreasing cap must be non-decreasing
    let monotone = times.windows(2).all(|w| w[1] >= w[0]);
    let plan = rank(&rows, f64::INFINITY).map_err(|e| e.to_string())?;
    let (csv, summary) = report(&plan);
    let csv_rows = csv.lines().count() - 1;
    if monotone && csv_rows == grid && grid == 10 * 6 * 2 * 2 {
        Ok(format!("{} caps, best time non-increasing as the cap rises; {csv_rows}-row CSV; {summary}", caps.len()))
    } else {
        Err(format!("monotone={monotone} csv_rows={csv_rows} grid={grid}"))
    }
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 8] = [
        ("bubble formula", criterion_1),
        ("baseline bubbles and activation rows", criterion_2),
        ("memory formula", criterion_3),
        ("communication model", criterion_4),
        ("traffic versus batch size", criterion_5),
        ("validator fuzzing", criterion_6),
        ("recompute accounting", criterion_7),
        ("planner monotonicity", criterion_8),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("criterion {} ({name}): PASS - {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} ({name}): FAIL - {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
