//! Standalone SVG line charts.

use std::fmt::Write;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN: f64 = 56.0;
const LEGEND: f64 = 170.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
    plot_w: f64,
    plot_h: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * self.plot_w
    }

    fn py(&self, y: f64) -> f64 {
        MARGIN + (self.y.1 - y) / (self.y.1 - self.y.0) * self.plot_h
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, (WIDTH - LEGEND) / 2.0, escape(title));
}

fn axes(out: &mut String, f: &Frame, x_label: &str) {
    let (x0, y0) = (MARGIN, MARGIN + f.plot_h);
    let _ = writeln!(
        out,
        r##"<rect x="{x0}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
        f.plot_w, f.plot_h
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = f.x.0 + t * (f.x.1 - f.x.0);
        let yv = f.y.0 + t * (f.y.1 - f.y.0);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xv:.2}</text>"#, f.px(xv), y0 + 16.0);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.2}</text>"#, x0 - 6.0, f.py(yv) + 4.0);
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, MARGIN + f.plot_w / 2.0, HEIGHT - 12.0, escape(x_label));
}

fn polyline(out: &mut String, f: &Frame, s: &Series, color: &str, index: usize) {
    let pts: Vec<String> = s
        .points
        .iter()
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
        .collect();
    let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.8" points="{}"/>"#, pts.join(" "));
    let ly = MARGIN + 18.0 * index as f64;
    let lx = WIDTH - LEGEND + 10.0;
    let _ = writeln!(out, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/>"#, lx + 18.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, lx + 24.0, ly + 4.0, escape(&s.name));
}

/// Curves against a shared x axis.
pub fn line_chart(title: &str, x_label: &str, series: &[Series]) -> String {
    let all = || series.iter().flat_map(|s| s.points.iter());
    let frame = Frame {
        x: bounds(all().map(|p| p.0)),
        y: bounds(all().map(|p| p.1).chain([0.0, 1.0])),
        plot_w: WIDTH - 2.0 * MARGIN - LEGEND,
        plot_h: HEIGHT - 2.0 * MARGIN,
    };
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &frame, x_label);
    for (i, s) in series.iter().enumerate() {
        polyline(&mut out, &frame, s, PALETTE[i % PALETTE.len()], i);
    }
    out.push_str("</svg>\n");
    out
}

/// Planar paths drawn with equal axis scales, plus labelled markers.
pub fn path_plot(title: &str, series: &[Series], marks: &[(String, (f64, f64))]) -> String {
    let xs = || series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).chain(marks.iter().map(|m| m.1 .0));
    let ys = || series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).chain(marks.iter().map(|m| m.1 .1));
    let (mut x, mut y) = (bounds(xs()), bounds(ys()));
    let plot_w = WIDTH - 2.0 * MARGIN - LEGEND;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let scale = ((x.1 - x.0) / plot_w).max((y.1 - y.0) / plot_h);
    let (cx, cy) = ((x.0 + x.1) / 2.0, (y.0 + y.1) / 2.0);
    x = (cx - scale * plot_w / 2.0, cx + scale * plot_w / 2.0);
    y = (cy - scale * plot_h / 2.0, cy + scale * plot_h / 2.0);
    let frame = Frame { x, y, plot_w, plot_h };
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &frame, "x");
    for (i, s) in series.iter().enumerate() {
        polyline(&mut out, &frame, s, PALETTE[i % PALETTE.len()], i);
    }
    for (name, (mx, my)) in marks {
        let (px, py) = (frame.px(*mx), frame.py(*my));
        let _ = writeln!(out, r##"<circle cx="{px:.2}" cy="{py:.2}" r="5" fill="none" stroke="#000" stroke-width="1.5"/>"##);
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, px + 8.0, py - 8.0, escape(name));
    }
    out.push_str("</svg>\n");
    out
}
