//! Hand-written SVG line plots of sweep metrics.
//!
//! One file per metric: value against the axis coordinate, a circle per
//! seed and a polyline through the per-coordinate medians, one series per
//! step count. The root element records the plotted value range
//! (`data-y-min`, `data-y-max`) and the plot area is the `rect` with class
//! `plot-area`, so pixel positions can be mapped back to values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::csv::read_metrics;
use crate::error::{invalid, io_err, Result};
use crate::evalbench::{axis_value_of, median, Metric, MetricsRow, SweepAxis};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 120.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Reads `csv` and writes `{metric}.svg` into `out_dir` for every metric
/// present on rows of `axis`.
pub fn emit_plots(csv: &Path, axis: SweepAxis, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = read_metrics(csv)?;
    plot_rows(&rows, axis, out_dir)
}

pub fn plot_rows(rows: &[MetricsRow], axis: SweepAxis, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let prefix = format!("{}=", axis.name());
    let selected: Vec<&MetricsRow> = rows.iter().filter(|r| r.run_id.starts_with(&prefix)).collect();
    if selected.is_empty() {
        return Err(invalid("plots", format!("no rows for axis `{}`", axis.name())));
    }
    let mut by_metric: BTreeMap<Metric, Vec<&MetricsRow>> = BTreeMap::new();
    for r in selected {
        by_metric.entry(r.metric).or_default().push(r);
    }
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut paths = Vec::new();
    for (metric, rows) in by_metric {
        let svg = render(axis, metric, &rows)?;
        let path = out_dir.join(format!("{metric}.svg"));
        fs::write(&path, svg).map_err(|e| io_err(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

fn render(axis: SweepAxis, metric: Metric, rows: &[&MetricsRow]) -> Result<String> {
    let mut coords: Vec<String> = Vec::new();
    for r in rows {
        let v = axis_value_of(&r.run_id)
            .expect("selected rows carry the axis")
            .to_string();
        if !coords.contains(&v) {
            coords.push(v);
        }
    }
    let numeric: Option<Vec<f64>> = coords.iter().map(|c| c.parse().ok()).collect();
    let positions: Vec<f64> = match &numeric {
        Some(v) => {
            let (lo, hi) = v
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            v.iter()
                .map(|&x| if hi > lo { (x - lo) / (hi - lo) } else { 0.5 })
                .collect()
        }
        None if coords.len() > 1 => (0..coords.len())
            .map(|i| i as f64 / (coords.len() - 1) as f64)
            .collect(),
        None => vec![0.5],
    };
    let (plot_w, plot_h) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let pad_x = 0.05 * plot_w;
    let px = |i: usize| LEFT + pad_x + positions[i] * (plot_w - 2.0 * pad_x);

    let (mut lo, mut hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| {
        (a.min(r.value), b.max(r.value))
    });
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(invalid("plots", format!("non-finite {metric} value")));
    }
    if hi > lo {
        let pad = 0.05 * (hi - lo);
        lo -= pad;
        hi += pad;
    } else {
        lo -= 0.5;
        hi += 0.5;
    }
    let py = |v: f64| TOP + (hi - v) / (hi - lo) * plot_h;

    let mut series: BTreeMap<usize, Vec<Vec<(u64, f64)>>> = BTreeMap::new();
    for r in rows {
        let i = coords
            .iter()
            .position(|c| c == axis_value_of(&r.run_id).expect("selected rows carry the axis"))
            .expect("coordinate collected above");
        series.entry(r.step).or_insert_with(|| vec![Vec::new(); coords.len()])[i].push((r.seed, r.value));
    }

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" data-y-min="{lo}" data-y-max="{hi}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<rect class="plot-area" x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{} vs {}</text>"#,
        LEFT + plot_w / 2.0,
        escape(metric.name()),
        escape(axis.name())
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = py(v);
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{y:.3}" x2="{LEFT}" y2="{y:.3}" stroke="black"/><text x="{}" y="{:.3}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.4}</text>"##,
            LEFT - 5.0,
            LEFT - 8.0,
            y + 4.0
        );
    }
    for (i, c) in coords.iter().enumerate() {
        let x = px(i);
        let y = TOP + plot_h;
        let _ = writeln!(
            s,
            r#"<line x1="{x:.3}" y1="{y}" x2="{x:.3}" y2="{}" stroke="black"/><text x="{x:.3}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{}</text>"#,
            y + 5.0,
            y + 18.0,
            escape(c)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13">{}</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 10.0,
        escape(axis.name())
    );
    for (k, (step, cells)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut points = Vec::new();
        for (i, cell) in cells.iter().enumerate() {
            for &(seed, v) in cell {
                let _ = writeln!(
                    s,
                    r#"<circle class="seed" data-step="{step}" data-seed="{seed}" cx="{:.6}" cy="{:.6}" r="3" fill="{color}" fill-opacity="0.5"/>"#,
                    px(i),
                    py(v)
                );
            }
            let vals: Vec<f64> = cell.iter().map(|&(_, v)| v).collect();
            if let Some(m) = median(&vals) {
                points.push(format!("{:.6},{:.6}", px(i), py(m)));
            }
        }
        let _ = writeln!(
            s,
            r#"<polyline class="median" data-step="{step}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            points.join(" ")
        );
        let ly = TOP + 16.0 * k as f64 + 8.0;
        let lx = WIDTH - RIGHT + 10.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}" font-family="sans-serif" font-size="11">{step} step{}</text>"#,
            lx + 20.0,
            lx + 25.0,
            ly + 4.0,
            if *step == 1 { "" } else { "s" }
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}
