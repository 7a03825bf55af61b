//! Minimal SVG line charts.

use std::fmt::Write;

const COLORS: [&str; 6] = ["#1f5fbf", "#2e9e44", "#d4571c", "#7a3fb0", "#444444", "#c0267a"];
const PANEL_W: f64 = 260.0;
const PANEL_H: f64 = 150.0;
const MARGIN: f64 = 28.0;

pub struct Series<'a> {
    pub label: &'a str,
    pub y: &'a [f64],
}

pub struct Panel<'a> {
    pub title: &'a str,
    pub series: Vec<Series<'a>>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grid of panels sharing the abscissa `x0 + k dx`.
pub fn line_panels(title: &str, panels: &[Panel], x0: f64, dx: f64, columns: usize) -> String {
    let columns = columns.max(1);
    let rows = panels.len().div_ceil(columns).max(1);
    let width = columns as f64 * (PANEL_W + MARGIN) + MARGIN;
    let legend_h = 20.0;
    let height = rows as f64 * (PANEL_H + MARGIN) + MARGIN + 2.0 * legend_h;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="16" font-size="13">{}</text>"#, escape(title));
    if let Some(first) = panels.first() {
        for (i, ser) in first.series.iter().enumerate() {
            let x = MARGIN + i as f64 * 120.0;
            let c = COLORS[i % COLORS.len()];
            let _ = writeln!(
                s,
                r#"<line x1="{x}" y1="30" x2="{}" y2="30" stroke="{c}" stroke-width="2"/><text x="{}" y="34">{}</text>"#,
                x + 16.0,
                x + 20.0,
                escape(ser.label)
            );
        }
    }
    for (p, panel) in panels.iter().enumerate() {
        let ox = MARGIN + (p % columns) as f64 * (PANEL_W + MARGIN);
        let oy = 2.0 * legend_h + MARGIN + (p / columns) as f64 * (PANEL_H + MARGIN);
        let n = panel.series.iter().map(|q| q.y.len()).max().unwrap_or(0);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in panel.series.iter().flat_map(|q| q.y.iter()).filter(|v| v.is_finite()) {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        if !(lo < hi) {
            let c = if lo.is_finite() { lo } else { 0.0 };
            lo = c - 1.0;
            hi = c + 1.0;
        }
        let _ = writeln!(
            s,
            r##"<rect x="{ox}" y="{oy}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#bbbbbb"/><text x="{}" y="{}">{}</text>"##,
            ox + 4.0,
            oy + 12.0,
            escape(panel.title)
        );
        let xmax = x0 + dx * n.saturating_sub(1) as f64;
        let _ = writeln!(
            s,
            r##"<text x="{ox}" y="{}" fill="#666666">{x0}</text><text x="{}" y="{}" fill="#666666" text-anchor="end">{xmax}</text>"##,
            oy + PANEL_H + 11.0,
            ox + PANEL_W,
            oy + PANEL_H + 11.0
        );
        let px = |k: usize| ox + PANEL_W * k as f64 / n.saturating_sub(1).max(1) as f64;
        let py = |v: f64| oy + PANEL_H - PANEL_H * (v - lo) / (hi - lo);
        for (i, ser) in panel.series.iter().enumerate() {
            let mut pts = String::new();
            for (k, v) in ser.y.iter().enumerate().filter(|(_, v)| v.is_finite()) {
                let _ = write!(pts, "{:.1},{:.1} ", px(k), py(*v));
            }
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{}" stroke-width="1.2" points="{}"/>"#,
                COLORS[i % COLORS.len()],
                pts.trim_end()
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
