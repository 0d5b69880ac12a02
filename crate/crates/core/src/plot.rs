//! Standalone SVG charts. Each file carries its data as CSV inside an XML comment.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::hw_cost::{Breakdown, CostReport};

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 4] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// `--` may not appear inside an XML comment.
fn comment(data: &str) -> String {
    let mut body = data.to_string();
    while body.contains("--") {
        body = body.replace("--", "- -");
    }
    format!("<!-- data\n{body}-->\n")
}

fn open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    s
}

fn axes(s: &mut String, x_label: &str, y_label: &str) {
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN, MARGIN);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        H - 15.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

/// Grouped bars of the component shares of latency, energy and area.
pub fn cost_breakdown_svg(report: &CostReport) -> String {
    let groups: [(&str, &Breakdown); 3] = [
        ("latency", &report.latency_s.shares),
        ("energy", &report.energy_j.shares),
        ("area", &report.area_m2.shares),
    ];
    let mut s = open(&format!(
        "{} on {}x{} {} cost breakdown",
        report.network, report.crossbar.rows, report.crossbar.cols, report.crossbar.device_type
    ));
    axes(&mut s, "metric", "share of total");
    let plot_h = H - 2.0 * MARGIN;
    let group_w = (W - 2.0 * MARGIN) / groups.len() as f64;
    let bar_w = group_w / 6.0;
    for f in [0.25, 0.5, 0.75, 1.0] {
        let y = H - MARGIN - f * plot_h;
        let _ = writeln!(
            s,
            r##"<line x1="{MARGIN}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{f}</text>"##,
            W - MARGIN,
            MARGIN - 5.0,
            y + 4.0
        );
    }
    let mut data = String::from("metric,array,adc,accumulation,peripheral\n");
    for (g, (name, b)) in groups.iter().enumerate() {
        let gx = MARGIN + g as f64 * group_w + bar_w;
        for (i, v) in b.values().iter().enumerate() {
            let h = v * plot_h;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                gx + i as f64 * bar_w,
                H - MARGIN - h,
                bar_w * 0.9,
                h,
                COLORS[i]
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{name}</text>"#,
            gx + 2.0 * bar_w,
            H - MARGIN + 16.0
        );
        let [a, d, c, p] = b.values();
        let _ = writeln!(data, "{name},{a},{d},{c},{p}");
    }
    for (i, c) in Breakdown::COMPONENTS.iter().enumerate() {
        let y = MARGIN + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{c}</text>"#,
            W - MARGIN - 100.0,
            y,
            COLORS[i],
            W - MARGIN - 85.0,
            y + 9.0
        );
    }
    s.push_str(&comment(&data));
    s.push_str("</svg>\n");
    s
}

/// One labelled point per `(label, x, y)`.
pub fn scatter_svg(title: &str, x_label: &str, y_label: &str, points: &[(String, f64, f64)]) -> Result<String> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("scatter plot needs at least one point".into()));
    }
    if points.iter().any(|(_, x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::NonFinite("scatter plot data".into()));
    }
    let span = |vals: Vec<f64>| {
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let pad = if hi > lo { 0.08 * (hi - lo) } else { 0.5 * lo.abs().max(1e-3) };
        (lo - pad, hi + pad)
    };
    let (xl, xh) = span(points.iter().map(|p| p.1).collect());
    let (yl, yh) = span(points.iter().map(|p| p.2).collect());
    let px = |x: f64| MARGIN + (x - xl) / (xh - xl) * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - (y - yl) / (yh - yl) * (H - 2.0 * MARGIN);

    let mut s = open(title);
    axes(&mut s, x_label, y_label);
    for (v, anchor) in [(xl, "start"), (xh, "end")] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="{anchor}">{v:.3}</text>"#,
            px(v),
            H - MARGIN + 16.0
        );
    }
    for v in [yl, yh] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{v:.4}</text>"#,
            MARGIN - 5.0,
            py(v) + 4.0
        );
    }
    let mut data = format!("label,{},{}\n", x_label.replace(',', ";"), y_label.replace(',', ";"));
    for (label, x, y) in points {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="5" fill="{}"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            px(*x),
            py(*y),
            COLORS[0],
            px(*x) + 7.0,
            py(*y) - 7.0,
            escape(label)
        );
        let _ = writeln!(data, "{},{x},{y}", label.replace(',', ";"));
    }
    s.push_str(&comment(&data));
    s.push_str("</svg>\n");
    Ok(s)
}
