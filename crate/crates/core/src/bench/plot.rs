//! Minimal SVG line plots: a grid of panels, each with one series.

use std::fmt::Write as _;

pub struct Panel {
    pub title: String,
    pub points: Vec<(f64, f64)>,
}

const PANEL_W: f64 = 260.0;
const PANEL_H: f64 = 180.0;
const MARGIN: f64 = 40.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v
        .filter(|x| x.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-300 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn tick(x: f64) -> String {
    if x != 0.0 && (x.abs() < 1e-3 || x.abs() >= 1e5) {
        format!("{x:.2e}")
    } else {
        format!("{x:.3}")
    }
}

/// Lays panels out in a near-square grid; `markers` draws a dot per point.
pub fn panel_grid(title: &str, x_label: &str, y_label: &str, panels: &[Panel], markers: bool) -> String {
    let n = panels.len().max(1);
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let w = cols as f64 * (PANEL_W + MARGIN) + MARGIN;
    let h = rows as f64 * (PANEL_H + MARGIN) + 2.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" font-size="14" text-anchor="middle">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    for (i, p) in panels.iter().enumerate() {
        let x0 = MARGIN + (i % cols) as f64 * (PANEL_W + MARGIN);
        let y0 = 2.0 * MARGIN + (i / cols) as f64 * (PANEL_H + MARGIN);
        let (xlo, xhi) = bounds(p.points.iter().map(|q| q.0));
        let (ylo, yhi) = bounds(p.points.iter().map(|q| q.1));
        let sx = |x: f64| x0 + (x - xlo) / (xhi - xlo) * PANEL_W;
        let sy = |y: f64| y0 + PANEL_H - (y - ylo) / (yhi - ylo) * PANEL_H;
        let _ = writeln!(
            s,
            r##"<rect x="{x0}" y="{y0}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#444"/>"##
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            x0 + PANEL_W / 2.0,
            y0 - 6.0,
            escape(&p.title)
        );
        let _ = writeln!(
            s,
            r#"<text x="{x0}" y="{}">{}</text><text x="{}" y="{}" text-anchor="end">{}</text>"#,
            y0 + PANEL_H + 12.0,
            tick(xlo),
            x0 + PANEL_W,
            y0 + PANEL_H + 12.0,
            tick(xhi)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text><text x="{}" y="{}" text-anchor="end">{}</text>"#,
            x0 - 2.0,
            y0 + PANEL_H,
            tick(ylo),
            x0 - 2.0,
            y0 + 8.0,
            tick(yhi)
        );
        let pts: Vec<String> = p
            .points
            .iter()
            .filter(|q| q.0.is_finite() && q.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if !pts.is_empty() {
            let _ = writeln!(
                s,
                r##"<polyline fill="none" stroke="#1f77b4" stroke-width="1.5" points="{}"/>"##,
                pts.join(" ")
            );
        }
        if markers {
            for q in p.points.iter().filter(|q| q.0.is_finite() && q.1.is_finite()) {
                let _ = writeln!(
                    s,
                    r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#d62728"/>"##,
                    sx(q.0),
                    sy(q.1)
                );
            }
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        w / 2.0,
        h - 8.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(y_label)
    );
    s.push_str("</svg>\n");
    s
}
