//! Minimal SVG line charts.

use std::fmt::Write;

pub const PALETTE: [&str; 4] = ["#1b9e77", "#7570b3", "#d95f02", "#e7298a"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub points: Vec<(f64, f64)>,
    pub color: String,
    pub width: f64,
    pub opacity: f64,
    pub markers: bool,
}

impl Series {
    pub fn line(points: Vec<(f64, f64)>, color: &str) -> Self {
        Self { points, color: color.to_string(), width: 2.0, opacity: 1.0, markers: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub title: String,
    pub series: Vec<Series>,
}

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 260.0;
const MARGIN_L: f64 = 56.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 52.0;
const MARGIN_B: f64 = 44.0;

fn range(panels: &[Panel], pick: impl Fn(&(f64, f64)) -> f64) -> (f64, f64) {
    let (lo, hi) = panels
        .iter()
        .flat_map(|p| p.series.iter())
        .flat_map(|s| s.points.iter())
        .map(pick)
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Side-by-side panels sharing both axis ranges.
pub fn render_panels(title: &str, x_label: &str, y_label: &str, panels: &[Panel]) -> String {
    let (x0, x1) = range(panels, |p| p.0);
    let (y0, y1) = range(panels, |p| p.1);
    let n = panels.len().max(1) as f64;
    let width = n * (PANEL_W + MARGIN_L + MARGIN_R);
    let height = PANEL_H + MARGIN_T + MARGIN_B;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#, width / 2.0, escape(title)).unwrap();
    for (pi, panel) in panels.iter().enumerate() {
        let left = pi as f64 * (PANEL_W + MARGIN_L + MARGIN_R) + MARGIN_L;
        let top = MARGIN_T;
        let sx = |x: f64| left + (x - x0) / (x1 - x0) * PANEL_W;
        let sy = |y: f64| top + PANEL_H - (y - y0) / (y1 - y0) * PANEL_H;
        writeln!(
            s,
            r#"<rect x="{left:.1}" y="{top:.1}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="gray"/>"#
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">{}</text>"#,
            left + PANEL_W / 2.0,
            top - 8.0,
            escape(&panel.title)
        )
        .unwrap();
        for t in 0..=4 {
            let fx = x0 + (x1 - x0) * t as f64 / 4.0;
            let fy = y0 + (y1 - y0) * t as f64 / 4.0;
            writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                sx(fx),
                top + PANEL_H + 14.0,
                tick(fx)
            )
            .unwrap();
            writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, left - 4.0, sy(fy) + 4.0, tick(fy))
                .unwrap();
        }
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            left + PANEL_W / 2.0,
            top + PANEL_H + 34.0,
            escape(x_label)
        )
        .unwrap();
        let (lx, ly) = (left - 42.0, top + PANEL_H / 2.0);
        writeln!(
            s,
            r#"<text x="{lx:.1}" y="{ly:.1}" text-anchor="middle" transform="rotate(-90 {lx:.1} {ly:.1})">{}</text>"#,
            escape(y_label)
        )
        .unwrap();
        for series in &panel.series {
            let pts: Vec<String> = series
                .points
                .iter()
                .filter(|p| p.0.is_finite() && p.1.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            if pts.is_empty() {
                continue;
            }
            writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="{}" stroke-opacity="{}"/>"#,
                pts.join(" "),
                series.color,
                series.width,
                series.opacity
            )
            .unwrap();
            if series.markers {
                for p in &pts {
                    let (cx, cy) = p.split_once(',').unwrap();
                    writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{}"/>"#, series.color).unwrap();
                }
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e5).contains(&a) {
        format!("{v:.1e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else if a >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: Vec<Series>) -> String {
    render_panels(title, x_label, y_label, &[Panel { title: String::new(), series }])
}
