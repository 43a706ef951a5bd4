//! Static recall-vs-K line chart as SVG.

use std::fmt::Write;

use ovsg_core::benchmark::{EvalReport, Slice};

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 5] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"];

pub fn recall_svg(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN * 2.5, HEIGHT - MARGIN, MARGIN / 2.0);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);

    let ks = &report.ks;
    let x_at = |i: usize| {
        if ks.len() <= 1 {
            (x0 + x1) / 2.0
        } else {
            x0 + (x1 - x0) * i as f64 / (ks.len() - 1) as f64
        }
    };
    let y_at = |r: f64| y0 - (y0 - y1) * r.clamp(0.0, 1.0);
    for (i, k) in ks.iter().enumerate() {
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">R@{k}</text>"#, x_at(i), y0 + 16.0);
    }
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let y = y_at(tick);
        let _ = writeln!(out, r##"<line x1="{x0}" y1="{y:.1}" x2="{x1}" y2="{y:.1}" stroke="#ddd"/>"##);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{tick:.2}</text>"#, x0 - 6.0, y + 4.0);
    }

    let slices = [Slice::All, Slice::Base, Slice::NovelObject, Slice::NovelRelation, Slice::NovelBoth];
    let mut legend = 0;
    for (slice, color) in slices.iter().zip(COLORS) {
        let points: Vec<(f64, f64)> = ks
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| Some((x_at(i), y_at(report.get(k, *slice)?))))
            .collect();
        if points.is_empty() {
            continue;
        }
        let path: Vec<String> = points.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
        let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
        for (x, y) in &points {
            let _ = writeln!(out, r#"<circle cx="{x:.1}" cy="{y:.1}" r="3" fill="{color}"/>"#);
        }
        let ly = y1 + 14.0 * legend as f64 + 6.0;
        let _ = writeln!(out, r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{color}"/>"#, x1 + 12.0, ly - 8.0);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{ly:.1}">{}</text>"#, x1 + 26.0, slice.as_str());
        legend += 1;
    }
    out.push_str("</svg>\n");
    out
}
