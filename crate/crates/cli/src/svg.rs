//! Minimal SVG output: a BEV scene view and line charts.

use std::fmt::Write;

use peerlabel::geom::{box_corners_bev, Box3, Point3};

const STYLE: &str = "\
.gt{fill:none;stroke:#1b9e44;stroke-width:2}\
.raw{fill:none;stroke:#d95f02;stroke-width:1.5;stroke-dasharray:4 2}\
.refined{fill:none;stroke:#3b5bdb;stroke-width:1.5}\
.pts{fill:#777}\
.axis{stroke:#222;stroke-width:1}\
.grid{stroke:#ddd;stroke-width:0.5}\
.series0{fill:none;stroke:#3b5bdb;stroke-width:2}\
.series1{fill:none;stroke:#d95f02;stroke-width:2}\
.series2{fill:none;stroke:#1b9e44;stroke-width:2}\
text{font-family:sans-serif;font-size:12px}";

/// Box layer of a scene plot; `class` doubles as the legend label.
pub struct BoxLayer<'a> {
    pub class: &'static str,
    pub label: &'a str,
    pub boxes: Vec<Box3>,
}

fn header(w: f64, h: f64, title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <style>{STYLE}</style>\n<title>{}</title>\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn legend(out: &mut String, x: f64, y: f64, entries: &[(&str, &str)]) {
    out.push_str("<g class=\"legend\">\n");
    for (i, (class, label)) in entries.iter().enumerate() {
        let yy = y + 18.0 * i as f64;
        let _ = writeln!(
            out,
            "<line class=\"{class}\" x1=\"{x}\" y1=\"{yy}\" x2=\"{}\" y2=\"{yy}\"/><text x=\"{}\" y=\"{}\">{}</text>",
            x + 24.0,
            x + 30.0,
            yy + 4.0,
            escape(label)
        );
    }
    out.push_str("</g>\n");
}

/// Top-down view of one frame in the ego frame: x forward to the right,
/// y left upwards.
pub fn scene(
    title: &str,
    x_range: [f64; 2],
    y_range: [f64; 2],
    points: &[Point3],
    layers: &[BoxLayer],
) -> String {
    let scale = 6.0;
    let w = (x_range[1] - x_range[0]) * scale;
    let h = (y_range[1] - y_range[0]) * scale;
    let px = |x: f64, y: f64| ((x - x_range[0]) * scale, (y_range[1] - y) * scale);
    let mut out = header(w, h + 30.0, title);
    out.push_str("<g class=\"points\">\n");
    for p in points {
        if p[0] < x_range[0] || p[0] > x_range[1] || p[1] < y_range[0] || p[1] > y_range[1] {
            continue;
        }
        let (x, y) = px(p[0], p[1]);
        let _ = writeln!(
            out,
            "<circle class=\"pts\" cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"0.8\"/>"
        );
    }
    out.push_str("</g>\n");
    for layer in layers {
        let _ = writeln!(out, "<g id=\"{}\">", layer.class);
        for b in &layer.boxes {
            let pts: Vec<String> = box_corners_bev(b)
                .vertices()
                .iter()
                .map(|v| {
                    let (x, y) = px(v[0], v[1]);
                    format!("{x:.1},{y:.1}")
                })
                .collect();
            let _ = writeln!(
                out,
                "<polygon class=\"{}\" points=\"{}\"/>",
                layer.class,
                pts.join(" ")
            );
        }
        out.push_str("</g>\n");
    }
    let (ex, ey) = px(0.0, 0.0);
    let _ = writeln!(
        out,
        "<path class=\"axis\" d=\"M{ex:.1},{ey:.1} l10,0 M{ex:.1},{ey:.1} l0,-10\"/>"
    );
    let entries: Vec<(&str, &str)> = layers.iter().map(|l| (l.class, l.label)).collect();
    legend(&mut out, 10.0, 16.0, &entries);
    out.push_str("</svg>\n");
    out
}

pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
}

/// Line chart with both axes fixed to the given ranges.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    x_range: [f64; 2],
    y_range: [f64; 2],
    series: &[Series],
) -> String {
    let (w, h, m) = (640.0, 420.0, 50.0);
    let px = |x: f64, y: f64| {
        (
            m + (x - x_range[0]) / (x_range[1] - x_range[0]) * (w - 2.0 * m),
            h - m - (y - y_range[0]) / (y_range[1] - y_range[0]) * (h - 2.0 * m),
        )
    };
    let mut out = header(w, h, title);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (gx, _) = px(x_range[0] + f * (x_range[1] - x_range[0]), y_range[0]);
        let (_, gy) = px(x_range[0], y_range[0] + f * (y_range[1] - y_range[0]));
        let _ = writeln!(
            out,
            "<line class=\"grid\" x1=\"{gx:.1}\" y1=\"{m}\" x2=\"{gx:.1}\" y2=\"{}\"/>\
             <line class=\"grid\" x1=\"{m}\" y1=\"{gy:.1}\" x2=\"{}\" y2=\"{gy:.1}\"/>\
             <text x=\"{gx:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>\
             <text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            h - m,
            w - m,
            h - m + 16.0,
            fmt_tick(x_range[0] + f * (x_range[1] - x_range[0])),
            m - 4.0,
            gy + 4.0,
            fmt_tick(y_range[0] + f * (y_range[1] - y_range[0])),
        );
    }
    let _ = writeln!(
        out,
        "<path class=\"axis\" d=\"M{m},{m} L{m},{} L{},{}\"/>\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\
         <text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\">{}</text>",
        h - m,
        w - m,
        h - m,
        w / 2.0,
        h - 12.0,
        escape(x_label),
        h / 2.0,
        h / 2.0,
        escape(y_label),
        w / 2.0,
        escape(title),
    );
    let mut entries = Vec::new();
    for (i, s) in series.iter().enumerate() {
        let class = ["series0", "series1", "series2"][i % 3];
        entries.push((class, s.label));
        let d: Vec<String> = s
            .points
            .iter()
            .enumerate()
            .map(|(j, &(x, y))| {
                let (a, b) = px(x, y);
                format!("{}{a:.1},{b:.1}", if j == 0 { 'M' } else { 'L' })
            })
            .collect();
        if !d.is_empty() {
            let _ = writeln!(out, "<path class=\"{class}\" d=\"{}\"/>", d.join(" "));
        }
    }
    legend(&mut out, w - m - 150.0, m + 10.0, &entries);
    out.push_str("</svg>\n");
    out
}

fn fmt_tick(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round())
    } else {
        format!("{v:.2}")
    }
}
