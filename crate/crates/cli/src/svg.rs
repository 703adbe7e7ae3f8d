//! Minimal polyline plots.

use std::fmt::Write;

const WIDTH: f64 = 720.0;
const PANEL_H: f64 = 200.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 130.0;
const MARGIN_T: f64 = 30.0;
const GAP: f64 = 40.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#7f7f7f"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    Line,
    Dots,
    Dashed,
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub style: Style,
}

pub struct Panel {
    pub title: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

fn bounds(panel: &Panel) -> (f64, f64, f64, f64) {
    let mut b = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for s in &panel.series {
        for &(x, y) in s.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
            b = (b.0.min(x), b.1.max(x), b.2.min(y), b.3.max(y));
        }
    }
    if !b.0.is_finite() {
        return (0.0, 1.0, -1.0, 1.0);
    }
    if b.1 - b.0 <= 0.0 {
        b.1 = b.0 + 1.0;
    }
    if b.3 - b.2 <= 0.0 {
        let pad = b.3.abs().max(1.0) * 0.5;
        b.2 -= pad;
        b.3 += pad;
    }
    let pad = 0.05 * (b.3 - b.2);
    (b.0, b.1, b.2 - pad, b.3 + pad)
}

fn label(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

pub fn render(title: &str, x_label: &str, panels: &[Panel]) -> String {
    let height = MARGIN_T + panels.len() as f64 * (PANEL_H + GAP) + 20.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    for (i, panel) in panels.iter().enumerate() {
        let top = MARGIN_T + i as f64 * (PANEL_H + GAP) + 10.0;
        let (x0, x1, y0, y1) = bounds(panel);
        let sx = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * plot_w;
        let sy = |y: f64| top + PANEL_H - (y - y0) / (y1 - y0) * PANEL_H;
        let _ = writeln!(
            out,
            r##"<rect x="{MARGIN_L}" y="{top}" width="{plot_w}" height="{PANEL_H}" fill="none" stroke="#444"/>"##
        );
        let _ = writeln!(out, r#"<text x="{MARGIN_L}" y="{}">{}</text>"#, top - 4.0, escape(&panel.title));
        for t in 0..=4 {
            let fx = x0 + (x1 - x0) * t as f64 / 4.0;
            let fy = y0 + (y1 - y0) * t as f64 / 4.0;
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, sx(fx), top + PANEL_H + 14.0, label(fx));
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, MARGIN_L - 4.0, sy(fy) + 4.0, label(fy));
        }
        if y0 < 0.0 && y1 > 0.0 {
            let _ = writeln!(
                out,
                r##"<line x1="{MARGIN_L}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#bbb"/>"##,
                MARGIN_L + plot_w,
                sy(0.0),
                sy(0.0)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">{}</text>"#,
            top + PANEL_H / 2.0,
            top + PANEL_H / 2.0,
            escape(&panel.y_label)
        );
        for (j, s) in panel.series.iter().enumerate() {
            let color = COLORS[j % COLORS.len()];
            match s.style {
                Style::Dots => {
                    for &(x, y) in &s.points {
                        let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="1.8" fill="{color}"/>"#, sx(x), sy(y));
                    }
                }
                Style::Line | Style::Dashed => {
                    let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
                    let dash = if s.style == Style::Dashed { r#" stroke-dasharray="5,4""# } else { "" };
                    let _ = writeln!(
                        out,
                        r#"<polyline fill="none" stroke="{color}" stroke-width="1.2"{dash} points="{}"/>"#,
                        pts.join(" ")
                    );
                }
            }
            let ly = top + 14.0 + 16.0 * j as f64;
            let lx = MARGIN_L + plot_w + 10.0;
            let _ = writeln!(out, r#"<rect x="{lx}" y="{:.1}" width="12" height="4" fill="{color}"/>"#, ly - 4.0);
            let _ = writeln!(out, r#"<text x="{}" y="{ly}">{}</text>"#, lx + 16.0, escape(&s.name));
        }
        if i + 1 == panels.len() {
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                MARGIN_L + plot_w / 2.0,
                top + PANEL_H + 30.0,
                escape(x_label)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
