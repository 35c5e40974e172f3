//! Self-contained SVG rendering of FROC curves.

use std::fmt::Write;

use vesselmae::evaluation::FrocCurve;

const W: f64 = 480.0;
const H: f64 = 360.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 50.0;
pub const FPR_MAX: f64 = 2.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn px(fpr: f64) -> f64 {
    LEFT + fpr.clamp(0.0, FPR_MAX) / FPR_MAX * (W - LEFT - RIGHT)
}

fn py(se: f64) -> f64 {
    H - BOTTOM - se.clamp(0.0, 1.0) * (H - TOP - BOTTOM)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Step polyline vertices: sensitivity holds until the next operating point
/// and the last value is carried to the right edge.
pub fn step_points(curve: &FrocCurve) -> Vec<(f64, f64)> {
    let mut pts = vec![(0.0, 0.0)];
    let mut se = 0.0;
    for p in &curve.points {
        if p.fpr > FPR_MAX {
            break;
        }
        pts.push((p.fpr, se));
        se = p.se;
        pts.push((p.fpr, se));
    }
    pts.push((FPR_MAX, se));
    pts.dedup();
    pts
}

pub fn froc_svg(curves: &[(&str, &FrocCurve)]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    for i in 0..=4 {
        let f = i as f64 * 0.5;
        let x = px(f);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#dddddd"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{f:.1}</text>"##,
            py(0.0),
            py(1.0),
            py(0.0) + 15.0
        );
    }
    for i in 0..=5 {
        let v = i as f64 * 0.2;
        let y = py(v);
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.1}</text>"##,
            px(0.0),
            px(FPR_MAX),
            px(0.0) - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
        px(0.0),
        py(1.0),
        px(FPR_MAX) - px(0.0),
        py(0.0) - py(1.0)
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">False positives per scan</text>"#,
        (px(0.0) + px(FPR_MAX)) / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(16 {:.2}) rotate(-90)" text-anchor="middle">Lesion sensitivity</text>"#,
        (py(0.0) + py(1.0)) / 2.0
    );
    for (k, (label, curve)) in curves.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = step_points(curve).iter().map(|&(f, v)| format!("{:.2},{:.2}", px(f), py(v))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = py(0.0) - 12.0 - 14.0 * (curves.len() - 1 - k) as f64;
        let lx = px(FPR_MAX) - 120.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{ly:.2}">{}</text>"#,
            ly - 4.0,
            lx + 18.0,
            ly - 4.0,
            lx + 24.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}
