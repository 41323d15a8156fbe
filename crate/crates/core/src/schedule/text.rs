//! Line-oriented schedule files.
//!
//! ```text
//! # variant ZEROPP
//! # unit_size 4
//! # config {...}
//! 0 AG_PARAM 0 - 0 -
//! 0 F 0 0 0 0
//! ```
//!
//! Task lines are `device kind stage microbatch unit start_slot`, with `-` for
//! absent fields. Lines appear in per-device execution order. Costs, sizes and
//! edges are rebuilt from the config when the file is read.

use std::collections::HashMap;
use std::fmt::Write as _;

use super::assemble::{derive_edges, TaskFactory};
use super::{Schedule, ScheduleError, Task, TaskKind, Variant};
use crate::model::Config;

#[derive(Debug, Clone, PartialEq)]
pub struct TextHeader {
    pub variant: Variant,
    pub unit_size: usize,
    pub config: Option<Config>,
}

fn opt(v: Option<usize>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

impl Schedule {
    /// Writes the schedule in the text format. `start_slots`, if given, holds
    /// one start time per task id, already expressed in slots.
    pub fn to_text(&self, config: Option<&Config>, start_slots: Option<&[f64]>) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# variant {}", self.variant);
        let _ = writeln!(out, "# unit_size {}", self.unit_size);
        if let Some(cfg) = config {
            let _ = writeln!(out, "# config {}", cfg.to_json());
        }
        for (d, ids) in self.per_device.iter().enumerate() {
            for &id in ids {
                let t = &self.tasks[id];
                let start = start_slots
                    .and_then(|s| s.get(id))
                    .map_or_else(|| "-".to_string(), |x| format!("{x}"));
                let _ = writeln!(
                    out,
                    "{d} {} {} {} {} {start}",
                    t.kind,
                    opt(t.stage),
                    opt(t.microbatch),
                    t.unit
                );
            }
        }
        out
    }

    /// Parses the text format. `config` takes precedence over a `# config`
    /// header line; one of the two must be present.
    pub fn from_text(text: &str, config: Option<&Config>) -> Result<(Schedule, TextHeader), ScheduleError> {
        let mut variant = Variant::Zeropp;
        let mut unit_size = None;
        let mut header_cfg = None;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let err = |msg: String| ScheduleError::Parse { line: lineno, msg };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                let (key, val) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
                match key {
                    "variant" => variant = val.trim().parse().map_err(err)?,
                    "unit_size" => {
                        unit_size = Some(val.trim().parse::<usize>().map_err(|e| err(e.to_string()))?);
                    }
                    "config" => header_cfg = Some(Config::from_json_str(val.trim())?),
                    _ => {}
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 6 && fields.len() != 5 {
                return Err(err(format!("expected 6 fields, found {}", fields.len())));
            }
            let num = |s: &str, what: &str| -> Result<usize, ScheduleError> {
                s.parse().map_err(|_| err(format!("bad {what} {s:?}")))
            };
            let maybe = |s: &str, what: &str| -> Result<Option<usize>, ScheduleError> {
                if s == "-" {
                    Ok(None)
                } else {
                    num(s, what).map(Some)
                }
            };
            let device = num(fields[0], "device")?;
            let kind: TaskKind = fields[1].parse().map_err(err)?;
            let stage = maybe(fields[2], "stage")?;
            let microbatch = maybe(fields[3], "microbatch")?;
            let unit = num(fields[4], "unit")?;
            if kind.is_pipeline() && (stage.is_none() || microbatch.is_none()) {
                return Err(err(format!("{kind} needs a stage and a micro-batch")));
            }
            if matches!(kind, TaskKind::AgParam | TaskKind::RsGrad) && stage.is_none() {
                return Err(err(format!("{kind} needs a stage")));
            }
            rows.push((device, kind, stage, microbatch, unit));
        }

        let cfg = config.cloned().or(header_cfg).ok_or(ScheduleError::Parse {
            line: 0,
            msg: "no config: pass one or add a '# config' header".into(),
        })?;
        let placement = cfg.placement();
        let unit_size = unit_size.unwrap_or(if variant == Variant::Zeropp {
            cfg.parallel.unit_size
        } else {
            cfg.parallel.microbatches
        });
        let factory = TaskFactory {
            model: &cfg.model,
            cfg: &cfg.parallel,
            placement: &placement,
            variant,
        };
        let stages = placement.num_stages();

        let mut occurrences: HashMap<(usize, usize, usize), u8> = HashMap::new();
        let mut tasks = Vec::with_capacity(rows.len());
        let mut per_device: Vec<Vec<usize>> = vec![Vec::new(); placement.num_devices];
        for (device, kind, stage, microbatch, unit) in rows {
            let in_range = stage.is_none_or(|s| s < stages);
            let template = match (kind, stage) {
                _ if !in_range => None,
                (k, Some(s)) if k.is_pipeline() => Some(factory.compute(k, s, 0)),
                (TaskKind::AgParam | TaskKind::RsGrad, Some(s)) => Some(factory.stage_collective(kind, s, 0, 0)),
                (k, _) if !k.is_pipeline() && device < placement.num_devices => Some(factory.device_task(k, device)),
                _ => None,
            };
            let occurrence = if kind == TaskKind::AgParam {
                let c = occurrences.entry((device, stage.unwrap_or(0), unit)).or_insert(0);
                *c += 1;
                *c - 1
            } else {
                0
            };
            let (cost, bytes) = template.map_or((0.0, 0.0), |t| (t.cost, t.bytes));
            if device >= per_device.len() {
                per_device.resize(device + 1, Vec::new());
            }
            per_device[device].push(tasks.len());
            tasks.push(Task {
                kind,
                stage,
                microbatch,
                unit,
                device,
                occurrence,
                cost,
                bytes,
            });
        }
        let mut sched = Schedule {
            variant,
            unit_size,
            tasks,
            per_device,
            edges: Vec::new(),
        };
        sched.edges = derive_edges(&sched, stages);
        let header = TextHeader {
            variant,
            unit_size,
            config: Some(cfg),
        };
        Ok((sched, header))
    }
}
