//! Hand-written SVG figures: a relbo versus infraction-rate scatter with one
//! labelled marker per method, and a row of ball-trajectory panels.

use std::fmt::Write as _;

use anyhow::Result;
use bridgegen_core::ballsim::Layout;

use crate::config::{RunConfig, Task};
use crate::formats::{self, MetricsRow};

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];
const SCATTER_W: f64 = 520.0;
const SCATTER_H: f64 = 360.0;
const MARGIN: f64 = 56.0;
const PANEL: f64 = 170.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.08 * (hi - lo) } else { 0.5 * lo.abs().max(1e-3) };
    (lo - pad, hi + pad)
}

/// Total infraction rate of a row, the scatter's horizontal coordinate.
pub fn infraction(row: &MetricsRow) -> f64 {
    row.report.collision_rate + row.report.boundary_rate
}

fn scatter(svg: &mut String, rows: &[MetricsRow], y0: f64) {
    let (x_lo, x_hi) = range(rows.iter().map(infraction).chain([0.0]));
    let (y_lo, y_hi) = range(rows.iter().map(|r| r.report.relbo));
    let (w, h) = (SCATTER_W - 2.0 * MARGIN, SCATTER_H - 2.0 * MARGIN);
    let px = |v: f64| MARGIN + (v - x_lo) / (x_hi - x_lo) * w;
    let py = |v: f64| y0 + MARGIN + (1.0 - (v - y_lo) / (y_hi - y_lo)) * h;
    let _ = writeln!(
        svg,
        r##"<rect x="{MARGIN}" y="{}" width="{w}" height="{h}" fill="none" stroke="#444"/>"##,
        y0 + MARGIN
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (xv, yv) = (x_lo + f * (x_hi - x_lo), y_lo + f * (y_hi - y_lo));
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{xv:.3}</text>"#,
            px(xv),
            y0 + SCATTER_H - MARGIN + 14.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{yv:.3}</text>"#,
            MARGIN - 4.0,
            py(yv) + 3.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">infraction rate (collision + boundary)</text>"#,
        MARGIN + w / 2.0,
        y0 + SCATTER_H - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {:.1})">relbo</text>"#,
        y0 + MARGIN + h / 2.0,
        y0 + MARGIN + h / 2.0
    );
    for (i, r) in rows.iter().enumerate() {
        let (x, y) = (px(infraction(r)), py(r.report.relbo));
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            svg,
            r#"<g class="marker"><circle cx="{x:.2}" cy="{y:.2}" r="5" fill="{c}"/><text x="{:.2}" y="{:.2}" font-size="11">{}</text></g>"#,
            x + 7.0,
            y - 6.0,
            escape(&r.method)
        );
    }
}

fn trajectories(svg: &mut String, scenarios: &[Vec<f64>], layout: Layout, half_width: f64, y0: f64) {
    let inner = PANEL - 20.0;
    let scale = inner / (2.0 * half_width);
    for (p, x) in scenarios.iter().enumerate() {
        let ox = 10.0 + p as f64 * PANEL;
        let oy = y0 + 10.0;
        let _ = writeln!(svg, r##"<rect x="{ox}" y="{oy}" width="{inner}" height="{inner}" fill="none" stroke="#888"/>"##);
        let map = |q: [f64; 2]| (ox + (q[0] + half_width) * scale, oy + (half_width - q[1]) * scale);
        for b in 0..layout.n_balls {
            let pts: Vec<String> = (0..layout.n_steps)
                .map(|t| {
                    let (u, v) = map(layout.position(x, t, b));
                    format!("{u:.2},{v:.2}")
                })
                .collect();
            let c = PALETTE[b % PALETTE.len()];
            let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="1.2"/>"#, pts.join(" "));
            let (u, v) = map(layout.position(x, layout.n_steps - 1, b));
            let _ = writeln!(svg, r#"<circle cx="{u:.2}" cy="{v:.2}" r="2.5" fill="{c}"/>"#);
        }
    }
}

/// Renders the scatter and, when scenarios are given, up to four trajectory
/// panels underneath.
pub fn render_svg(rows: &[MetricsRow], scenarios: &[Vec<f64>], layout: Option<Layout>, half_width: f64) -> String {
    let panels = if layout.is_some() { scenarios.len().min(4) } else { 0 };
    let width = SCATTER_W.max(20.0 + panels as f64 * PANEL);
    let height = SCATTER_H + if panels > 0 { PANEL + 10.0 } else { 0.0 };
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    scatter(&mut svg, rows, 0.0);
    if let Some(l) = layout {
        trajectories(&mut svg, &scenarios[..panels], l, half_width, SCATTER_H);
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn cmd_plot(cfg: &RunConfig) -> Result<()> {
    let rows = formats::read_metrics(&cfg.metrics)?;
    let (scenarios, layout) = match cfg.task {
        Task::Balls if cfg.samples.exists() => (formats::read_samples(&cfg.samples)?, Some(cfg.layout())),
        _ => (Vec::new(), None),
    };
    let svg = render_svg(&rows, &scenarios, layout, cfg.constraint_box_halfwidth);
    std::fs::write(&cfg.plot, svg)?;
    Ok(())
}
