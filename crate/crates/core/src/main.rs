use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use zeropp::cost::{self, Method};
use zeropp::fuzz::fuzz_check;
use zeropp::model::Config;
use zeropp::planner::{report, search, SearchSpace};
use zeropp::render::{render_timeline, Format};
use zeropp::schedule::{generate, Schedule, Variant};
use zeropp::sim::{bubble_ratio, simulate, SimResult};
use zeropp::validate::validate;

#[derive(Parser)]
#[command(name = "zeropp", version, about = "Pipeline schedules with sharded parameters: generate, check, simulate, plan")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a schedule and write it as text or JSON.
    Plan {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "zeropp")]
        variant: Variant,
        /// Output file (stdout if absent).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Check a schedule file, or fuzz the generators.
    Validate {
        #[arg(long, required_unless_present = "fuzz")]
        schedule: Option<PathBuf>,
        /// Config for the schedule; overrides a `# config` header.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run this many random generate/validate/mutate trials instead.
        #[arg(long)]
        fuzz: Option<usize>,
        /// Fuzz seed; the ZEROPP_SEED environment variable takes precedence.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Simulate one variant and report time, bubbles, memory and traffic.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "zeropp")]
        variant: Variant,
        /// Per-device CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Full result as JSON.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Closed-form comparison table.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        /// `all` or a comma-separated list of methods.
        #[arg(long, default_value = "all")]
        methods: String,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Search U, V, recompute and hybrid mode under a memory cap.
    Search {
        #[arg(long)]
        config: PathBuf,
        /// Per-device memory cap in GB (10^9 bytes); unlimited if absent.
        #[arg(long)]
        mem_cap_gb: Option<f64>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Draw a simulated timeline.
    Render {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "zeropp")]
        variant: Variant,
        #[arg(long, default_value = "ascii")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Traffic of tensor parallelism vs fully sharded data parallelism over global batch sizes.
    Figure1 {
        #[arg(long)]
        config: PathBuf,
        /// Global batch sizes.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64,128")]
        batches: Vec<usize>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load(path: &Path) -> Result<Config> {
    Config::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn run_variant(cfg: &Config, variant: Variant) -> Result<(Schedule, SimResult)> {
    let placement = cfg.placement();
    let sched = generate(variant, &cfg.model, &cfg.parallel, &placement)?;
    let violations = validate(&sched, &placement, &cfg.parallel);
    if let Some(v) = violations.first() {
        bail!("generated schedule is invalid: {v}");
    }
    let result = simulate(&sched, &cfg.model, &cfg.parallel, &placement, &cfg.costs)?;
    Ok((sched, result))
}

/// Returns `Ok(false)` when the command ran but found a problem.
fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Plan {
            config,
            variant,
            out,
            json,
        } => {
            let cfg = load(&config)?;
            let (sched, result) = run_variant(&cfg, variant)?;
            let text = if json {
                sched.to_json()
            } else {
                let slot = result.uniform_task_cost.unwrap_or(1.0);
                let slots: Vec<f64> = result.task_times.iter().map(|t| t.0 / slot).collect();
                sched.to_text(Some(&cfg), Some(&slots))
            };
            write_out(out.as_deref(), &text)?;
            Ok(true)
        }
        Cmd::Validate {
            schedule,
            config,
            fuzz,
            seed,
        } => {
            if let Some(trials) = fuzz {
                let seed = match std::env::var("ZEROPP_SEED") {
                    Ok(s) => s.trim().parse().context("ZEROPP_SEED must be an unsigned integer")?,
                    Err(_) => seed,
                };
                let summary = fuzz_check(seed, trials);
                println!(
                    "seed {seed}: {}/{} generated schedules valid; {}/{} edge inversions rejected; {} trials without an invertible edge",
                    summary.valid, summary.trials, summary.rejected, summary.mutations, summary.unmutated
                );
                for f in &summary.failures {
                    println!("FAIL trial {} ({}, L={}): {}", f.trial, f.variant, f.num_layers, f.detail);
                }
                return Ok(summary.ok());
            }
            let path = schedule.expect("clap requires --schedule without --fuzz");
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let cfg = config.as_deref().map(load).transpose()?;
            let (sched, cfg) = if text.trim_start().starts_with('{') {
                let cfg = cfg.context("JSON schedules need --config")?;
                (Schedule::from_json(&text)?, cfg)
            } else {
                let (s, header) = Schedule::from_text(&text, cfg.as_ref())?;
                (s, header.config.expect("parser always returns the config it used"))
            };
            let violations = validate(&sched, &cfg.placement(), &cfg.parallel);
            for v in &violations {
                println!("{v}");
            }
            if violations.is_empty() {
                println!("ok: {} tasks, no violations", sched.tasks.len());
            }
            Ok(violations.is_empty())
        }
        Cmd::Simulate {
            config,
            variant,
            csv,
            trace,
        } => {
            let cfg = load(&config)?;
            let (_, r) = run_variant(&cfg, variant)?;
            let ratios = bubble_ratio(&r);
            let mut table = String::from("device,busy,idle,makespan,peak_mem_bytes,intra_bytes,inter_bytes\n");
            for d in 0..r.per_device_busy.len() {
                let _ = writeln!(
                    table,
                    "{d},{},{},{},{},{},{}",
                    r.per_device_busy[d],
                    r.per_device_idle[d],
                    r.makespan,
                    r.peak_mem[d].total,
                    r.comm_bytes_intra[d],
                    r.comm_bytes_inter[d]
                );
            }
            println!("{variant}: makespan {}", r.makespan);
            for (d, ratio) in ratios.iter().enumerate() {
                let m = &r.peak_mem[d];
                println!(
                    "  d{d}: bubble {:.4}  peak {:.4e} B (weights {:.4e}, activations {:.4e}, gradients {:.4e}, optimizer {:.4e})",
                    ratio,
                    m.total,
                    m.components.weights,
                    m.components.activations,
                    m.components.gradients,
                    m.components.optimizer
                );
            }
            if let Some(p) = csv {
                write_out(Some(&p), &table)?;
            }
            if let Some(p) = trace {
                write_out(Some(&p), &serde_json::to_string_pretty(&r)?)?;
            }
            Ok(true)
        }
        Cmd::Analyze { config, methods, csv } => {
            let cfg = load(&config)?;
            let methods: Vec<Method> = if methods.eq_ignore_ascii_case("all") {
                Method::TABLE.to_vec()
            } else {
                methods
                    .split(',')
                    .map(|m| m.trim().parse().map_err(anyhow::Error::msg))
                    .collect::<Result<_>>()?
            };
            let mut table = String::from("method,bubble_ratio,weight_mem,activation_mem,comm_volume_per_block,crossover\n");
            for m in methods {
                let mut par = cfg.parallel.clone();
                if matches!(m, Method::Gpipe | Method::OneFOneB) {
                    // these rows are defined for one stage per device
                    par.stages_per_device = 1;
                }
                let row = cost::table2_row(m, &cfg.model, &par)?;
                let _ = writeln!(
                    table,
                    "{},{},{},{},{},{}",
                    row.method,
                    row.bubble_ratio,
                    row.weight_mem,
                    row.activation_mem,
                    row.comm_volume_per_block,
                    row.crossover_satisfied
                );
            }
            let (w, a) = cost::memory_formula(&cfg.model, &cfg.parallel);
            println!("{}", table.trim_end());
            println!(
                "bubble slots (formula): {}; weight mem {w:.4e}; activation mem {a:.4e}",
                cost::bubble_formula(&cfg.parallel)
            );
            if let Some(p) = csv {
                write_out(Some(&p), &table)?;
            }
            Ok(true)
        }
        Cmd::Search {
            config,
            mem_cap_gb,
            csv,
        } => {
            let cfg = load(&config)?;
            let cap = mem_cap_gb.map_or(f64::INFINITY, |g| g * 1e9);
            let plan = search(&SearchSpace::full(cfg, cap))?;
            let (table, summary) = report(&plan);
            println!("{summary}");
            match csv {
                Some(p) => write_out(Some(&p), &table)?,
                None => print!("{table}"),
            }
            Ok(true)
        }
        Cmd::Render {
            config,
            variant,
            format,
            out,
        } => {
            let cfg = load(&config)?;
            let (sched, r) = run_variant(&cfg, variant)?;
            write_out(out.as_deref(), &render_timeline(&r, &sched, format))?;
            Ok(true)
        }
        Cmd::Figure1 { config, batches, csv } => {
            let cfg = load(&config)?;
            let pts = cost::figure1_curve(&cfg.model, &batches);
            let mut table = String::from("global_batch,tp_bytes,zero3_bytes,ratio\n");
            for p in &pts {
                let _ = writeln!(
                    table,
                    "{},{},{},{}",
                    p.global_batch,
                    p.tp_bytes,
                    p.zero3_bytes,
                    p.tp_bytes / p.zero3_bytes
                );
            }
            print!("{table}");
            println!(
                "sharded data parallelism moves fewer bytes from global batch {} on",
                cost::figure1_crossover(&cfg.model)
            );
            if let Some(p) = csv {
                write_out(Some(&p), &table)?;
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
