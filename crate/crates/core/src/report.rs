//! Result-table CSV serialization and SVG chart rendering.
//!
//! Both outputs are plain strings assembled with fixed formatting so that
//! regenerating a report from the same inputs is byte-for-byte identical.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::eval::{mean_std, SweepAggregate, SweepRow, SweepTable};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("failed to write {path}: {source}")]
    Write { path: String, source: std::io::Error },
    #[error("failed to read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{path}:{line}: malformed results row: {detail}")]
    Parse { path: String, line: usize, detail: String },
    #[error("no rows to chart")]
    Empty,
}

pub type Result<T> = std::result::Result<T, ReportError>;

pub const RESULTS_HEADER: &str = "init,mode,percent,run,split_seed,metric_name,value";

/// Raw rows first, then per-cell `mean`/`std` rows in the `run` column.
pub fn results_csv(table: &SweepTable) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in &table.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.init, r.mode, fmt_percent(r.percent), r.run, r.split_seed, r.metric_name, r.value
        );
    }
    for a in &table.aggregates {
        let _ = writeln!(
            out,
            "{},{},{},mean,,{},{}",
            a.init, a.mode, fmt_percent(a.percent), a.metric_name, a.mean
        );
        let _ = writeln!(
            out,
            "{},{},{},std,,{},{}",
            a.init, a.mode, fmt_percent(a.percent), a.metric_name, a.std
        );
    }
    out
}

fn fmt_percent(p: f64) -> String {
    if p.fract() == 0.0 {
        format!("{}", p as i64)
    } else {
        format!("{p}")
    }
}

pub fn write_results(table: &SweepTable, path: &Path) -> Result<()> {
    std::fs::write(path, results_csv(table))
        .map_err(|source| ReportError::Write { path: path.display().to_string(), source })
}

/// Read a results CSV back. Aggregate rows (non-numeric `run`) are skipped;
/// aggregates are recomputed from the raw rows so the chart never trusts
/// stale statistics.
pub fn read_results(path: &Path) -> Result<SweepTable> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ReportError::Read { path: path.display().to_string(), source })?;
    parse_results(&text, &path.display().to_string())
}

pub fn parse_results(text: &str, origin: &str) -> Result<SweepTable> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != RESULTS_HEADER {
                return Err(ReportError::Parse {
                    path: origin.into(),
                    line: 1,
                    detail: format!("expected header '{RESULTS_HEADER}'"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(ReportError::Parse {
                path: origin.into(),
                line: i + 1,
                detail: format!("expected 7 columns, got {}", parts.len()),
            });
        }
        let Ok(run) = parts[3].parse::<usize>() else {
            continue; // aggregate row
        };
        let parse_f = |s: &str, what: &str| {
            s.parse::<f64>().map_err(|_| ReportError::Parse {
                path: origin.into(),
                line: i + 1,
                detail: format!("bad {what} '{s}'"),
            })
        };
        rows.push(SweepRow {
            init: parts[0].into(),
            mode: parts[1].into(),
            percent: parse_f(parts[2], "percent")?,
            run,
            split_seed: parts[4].parse().map_err(|_| ReportError::Parse {
                path: origin.into(),
                line: i + 1,
                detail: format!("bad split_seed '{}'", parts[4]),
            })?,
            metric_name: parts[5].into(),
            value: parse_f(parts[6], "value")?,
        });
    }
    Ok(with_recomputed_aggregates(rows))
}

/// Group raw rows into (init, mode, percent) cells and recompute mean/std.
pub fn with_recomputed_aggregates(rows: Vec<SweepRow>) -> SweepTable {
    let mut cells: Vec<(String, String, f64, String, Vec<f64>)> = Vec::new();
    for r in &rows {
        match cells
            .iter_mut()
            .find(|(i, m, p, _, _)| *i == r.init && *m == r.mode && *p == r.percent)
        {
            Some((_, _, _, _, vs)) => vs.push(r.value),
            None => cells.push((r.init.clone(), r.mode.clone(), r.percent, r.metric_name.clone(), vec![r.value])),
        }
    }
    let aggregates = cells
        .into_iter()
        .map(|(init, mode, percent, metric_name, vs)| {
            let (mean, std) = mean_std(&vs);
            SweepAggregate { init, mode, percent, metric_name, mean, std }
        })
        .collect();
    SweepTable { rows, aggregates }
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 440.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 28.0;
const MARGIN_B: f64 = 52.0;
const SERIES_COLORS: [&str; 6] = ["#1f6fb2", "#c44e52", "#55a868", "#8172b3", "#ccb974", "#64b5cd"];

fn f(v: f64) -> String {
    format!("{v:.2}")
}

/// Render one line per `init` series: x = label percent, y = mean metric,
/// vertical error bars at ±1 std. Output is deterministic for equal input.
pub fn sweep_svg(table: &SweepTable) -> Result<String> {
    if table.aggregates.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut series: Vec<(&str, Vec<&SweepAggregate>)> = Vec::new();
    for a in &table.aggregates {
        match series.iter_mut().find(|(n, _)| *n == a.init) {
            Some((_, v)) => v.push(a),
            None => series.push((&a.init, vec![a])),
        }
    }
    for (_, pts) in &mut series {
        pts.sort_by(|a, b| a.percent.partial_cmp(&b.percent).unwrap());
    }
    let xs: Vec<f64> = table.aggregates.iter().map(|a| a.percent).collect();
    let lows: Vec<f64> = table.aggregates.iter().map(|a| a.mean - a.std).collect();
    let highs: Vec<f64> = table.aggregates.iter().map(|a| a.mean + a.std).collect();
    let (x_min, x_max) = bounds(&xs);
    let (y_min, y_max) = bounds_pair(&lows, &highs);
    let px = |x: f64| MARGIN_L + (x - x_min) / (x_max - x_min) * (SVG_W - MARGIN_L - MARGIN_R);
    let py = |y: f64| SVG_H - MARGIN_B - (y - y_min) / (y_max - y_min) * (SVG_H - MARGIN_T - MARGIN_B);
    let metric = &table.aggregates[0].metric_name;
    let mode = &table.aggregates[0].mode;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">"
    );
    let _ = writeln!(svg, "  <rect width=\"{SVG_W}\" height=\"{SVG_H}\" fill=\"#ffffff\"/>");
    // axes
    let _ = writeln!(
        svg,
        "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#222222\"/>",
        f(MARGIN_L), f(SVG_H - MARGIN_B), f(SVG_W - MARGIN_R), f(SVG_H - MARGIN_B)
    );
    let _ = writeln!(
        svg,
        "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#222222\"/>",
        f(MARGIN_L), f(MARGIN_T), f(MARGIN_L), f(SVG_H - MARGIN_B)
    );
    // axis labels and ticks
    for i in 0..=4 {
        let ty = y_min + (y_max - y_min) * f64::from(i) / 4.0;
        let _ = writeln!(
            svg,
            "  <text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\" fill=\"#222222\">{ty:.3}</text>",
            f(MARGIN_L - 6.0), f(py(ty) + 4.0)
        );
    }
    let mut tick_xs: Vec<f64> = xs.clone();
    tick_xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    tick_xs.dedup();
    for tx in &tick_xs {
        let _ = writeln!(
            svg,
            "  <text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\" fill=\"#222222\">{}</text>",
            f(px(*tx)), f(SVG_H - MARGIN_B + 16.0), fmt_percent(*tx)
        );
    }
    let _ = writeln!(
        svg,
        "  <text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" fill=\"#222222\">labeled data (%)</text>",
        f((MARGIN_L + SVG_W - MARGIN_R) / 2.0), f(SVG_H - 12.0)
    );
    let _ = writeln!(
        svg,
        "  <text x=\"16\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" fill=\"#222222\" transform=\"rotate(-90 16 {})\">{metric} ({mode})</text>",
        f((MARGIN_T + SVG_H - MARGIN_B) / 2.0), f((MARGIN_T + SVG_H - MARGIN_B) / 2.0)
    );
    // series
    for (si, (name, pts)) in series.iter().enumerate() {
        let color = SERIES_COLORS[si % SERIES_COLORS.len()];
        let path: Vec<String> = pts.iter().map(|a| format!("{},{}", f(px(a.percent)), f(py(a.mean)))).collect();
        let _ = writeln!(svg, "  <polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>", path.join(" "));
        for a in pts {
            let (cx, cy) = (px(a.percent), py(a.mean));
            let _ = writeln!(
                svg,
                "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\"/>",
                f(cx), f(py(a.mean - a.std)), f(cx), f(py(a.mean + a.std))
            );
            let _ = writeln!(svg, "  <circle cx=\"{}\" cy=\"{}\" r=\"2.5\" fill=\"{color}\"/>", f(cx), f(cy));
        }
        let ly = MARGIN_T + 14.0 * si as f64;
        let _ = writeln!(
            svg,
            "  <rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{color}\"/>",
            f(SVG_W - MARGIN_R - 130.0), f(ly)
        );
        let _ = writeln!(
            svg,
            "  <text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"#222222\">{name}</text>",
            f(SVG_W - MARGIN_R - 115.0), f(ly + 9.0)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn bounds(xs: &[f64]) -> (f64, f64) {
    let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if (max - min).abs() < 1e-12 {
        (min - 1.0, max + 1.0)
    } else {
        (min, max)
    }
}

fn bounds_pair(lows: &[f64], highs: &[f64]) -> (f64, f64) {
    let min = lows.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = highs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if (max - min).abs() < 1e-12 {
        (min - 0.5, max + 0.5)
    } else {
        let pad = (max - min) * 0.05;
        (min - pad, max + pad)
    }
}

pub fn write_sweep_svg(table: &SweepTable, path: &Path) -> Result<()> {
    std::fs::write(path, sweep_svg(table)?)
        .map_err(|source| ReportError::Write { path: path.display().to_string(), source })
}
