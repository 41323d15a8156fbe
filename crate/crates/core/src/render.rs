//! Timeline rendering of a simulated schedule, as ASCII or SVG.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::schedule::{Schedule, TaskKind};
use crate::sim::SimResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Ascii,
    Svg,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ascii" | "text" => Ok(Format::Ascii),
            "svg" => Ok(Format::Svg),
            _ => Err(format!("unknown format {s:?} (ascii or svg)")),
        }
    }
}

pub fn glyph(kind: TaskKind) -> char {
    match kind {
        TaskKind::F => 'F',
        TaskKind::B => 'B',
        TaskKind::W => 'W',
        TaskKind::R => 'r',
        TaskKind::Opt => 'O',
        _ => '~',
    }
}

const IDLE: char = '.';

pub fn render_timeline(result: &SimResult, sched: &Schedule, format: Format) -> String {
    match format {
        Format::Ascii => render_ascii(result, sched),
        Format::Svg => render_svg(result, sched),
    }
}

/// Length of one column: the common task cost when all pipeline tasks share
/// one, otherwise the shortest positive compute duration.
fn column_length(result: &SimResult, sched: &Schedule) -> f64 {
    if let Some(c) = result.uniform_task_cost.filter(|&c| c > 0.0) {
        return c;
    }
    log::warn!("task costs differ; ASCII timeline uses proportional widths");
    sched
        .tasks
        .iter()
        .zip(&result.task_times)
        .filter(|(t, _)| t.kind.is_compute())
        .map(|(_, &(s, e))| e - s)
        .filter(|&d| d > 0.0)
        .fold(f64::INFINITY, f64::min)
}

fn render_ascii(result: &SimResult, sched: &Schedule) -> String {
    let col = column_length(result, sched);
    let mut out = String::new();
    if !col.is_finite() {
        let _ = writeln!(out, "(empty timeline)");
        return out;
    }
    let to_col = |t: f64| (t / col).round() as usize;
    let width = to_col(result.makespan);
    let show_comm = sched
        .tasks
        .iter()
        .zip(&result.task_times)
        .any(|(t, &(s, e))| t.kind.is_collective() && e > s);
    let label_width = format!("{}", sched.num_devices().saturating_sub(1)).len() + 1;

    for (d, ids) in sched.per_device.iter().enumerate() {
        let mut lane = vec![IDLE; width];
        let mut comm = vec![' '; width];
        for &id in ids {
            let t = &sched.tasks[id];
            let (s, e) = result.task_times[id];
            let (a, b) = (to_col(s), to_col(e).min(width));
            if t.kind.is_compute() {
                lane[a.min(b)..b].fill(glyph(t.kind));
            } else if e > s {
                // a collective shorter than a column still gets one cell
                let b = b.max(a + 1).min(width);
                comm[a.min(b)..b].fill('~');
            }
        }
        let cells = |v: &[char]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ");
        let _ = writeln!(out, "{:<label_width$} {}", format!("d{d}"), cells(&lane));
        if show_comm {
            let _ = writeln!(out, "{:<label_width$} {}", "", cells(&comm).trim_end());
        }
    }
    let _ = writeln!(
        out,
        "legend: F forward, B input grad (fused with W in baselines), W weight grad, r recompute, ~ collective, O optimizer, . idle; column = {col}"
    );
    out
}

fn color(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::F => "#4e79a7",
        TaskKind::B => "#f28e2b",
        TaskKind::W => "#59a14f",
        TaskKind::R => "#b07aa1",
        TaskKind::Opt => "#9c755f",
        _ => "#bab0ac",
    }
}

fn render_svg(result: &SimResult, sched: &Schedule) -> String {
    const WIDTH: f64 = 960.0;
    const LEFT: f64 = 40.0;
    const LANE: f64 = 22.0;
    const COMM: f64 = 8.0;
    const GAP: f64 = 6.0;
    let scale = if result.makespan > 0.0 { WIDTH / result.makespan } else { 0.0 };
    let row = LANE + COMM + GAP;
    let height = row * sched.num_devices() as f64 + 30.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{height:.0}" font-family="monospace" font-size="10">"#,
        WIDTH + LEFT + 10.0
    );
    for (d, ids) in sched.per_device.iter().enumerate() {
        let y = d as f64 * row + 4.0;
        let _ = writeln!(out, r#"<text x="2" y="{:.2}">d{d}</text>"#, y + LANE * 0.7);
        let _ = writeln!(
            out,
            r##"<rect x="{LEFT}" y="{y:.2}" width="{WIDTH:.2}" height="{LANE}" fill="#f4f4f4"/>"##
        );
        for &id in ids {
            let t = &sched.tasks[id];
            let (s, e) = result.task_times[id];
            if e <= s {
                continue;
            }
            let x = LEFT + s * scale;
            let w = (e - s) * scale;
            let (ty, h) = if t.kind.is_compute() { (y, LANE) } else { (y + LANE, COMM) };
            let _ = writeln!(
                out,
                r##"<rect x="{x:.2}" y="{ty:.2}" width="{w:.2}" height="{h}" fill="{}" stroke="#ffffff" stroke-width="0.5"><title>{}</title></rect>"##,
                color(t.kind),
                t.key()
            );
            if t.kind.is_pipeline() && w >= 14.0 {
                let label = format!("{}{}", glyph(t.kind), t.microbatch.unwrap_or(0));
                let _ = writeln!(
                    out,
                    r#"<text x="{:.2}" y="{:.2}" fill="white">{label}</text>"#,
                    x + 2.0,
                    y + LANE * 0.7
                );
            }
        }
    }
    let ly = height - 10.0;
    let mut lx = LEFT;
    for (kind, name) in [
        (TaskKind::F, "F"),
        (TaskKind::B, "B"),
        (TaskKind::W, "W"),
        (TaskKind::R, "recompute"),
        (TaskKind::AgParam, "collective"),
        (TaskKind::Opt, "optimizer"),
    ] {
        let _ = writeln!(
            out,
            r#"<rect x="{lx:.2}" y="{:.2}" width="10" height="10" fill="{}"/><text x="{:.2}" y="{ly:.2}">{name}</text>"#,
            ly - 9.0,
            color(kind),
            lx + 13.0
        );
        lx += 20.0 + 7.0 * name.len() as f64;
    }
    out.push_str("</svg>\n");
    out
}
