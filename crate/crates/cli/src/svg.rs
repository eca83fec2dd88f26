//! Minimal line plot of perturbation curves.

use std::fmt::Write as _;

use vdm_core::eval::{Order, PerturbationCurve};

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

pub fn curves(curves: &[PerturbationCurve]) -> String {
    let max_kl = curves
        .iter()
        .flat_map(|c| c.kl.iter().copied())
        .fold(1e-9, f64::max);
    let max_f = curves
        .iter()
        .flat_map(|c| c.fractions.last().copied())
        .fold(1e-9, f64::max);
    let x = |f: f64| MARGIN + f / max_f * (W - 2.0 * MARGIN);
    let y = |v: f64| H - MARGIN - v / max_kl * (H - 2.0 * MARGIN);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#).unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN, MARGIN);
    writeln!(s, r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" stroke="black" fill="none"/>"#).unwrap();
    for i in 0..=4 {
        let v = max_kl * i as f64 / 4.0;
        writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{v:.2}</text>"#, x0 - 6.0, y(v) + 4.0).unwrap();
        let f = max_f * i as f64 / 4.0;
        writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{f:.2}</text>"#, x(f), y0 + 16.0).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">fraction of patches removed</text>"#, W / 2.0, H - 12.0).unwrap();
    writeln!(
        s,
        r#"<text x="16" y="{}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {})">KL to unperturbed</text>"#,
        H / 2.0,
        H / 2.0
    )
    .unwrap();
    for (i, c) in curves.iter().enumerate() {
        let color = COLORS[(i / 2) % COLORS.len()];
        let dash = if c.order == Order::Negative { r#" stroke-dasharray="6 4""# } else { "" };
        let points: Vec<String> = c
            .fractions
            .iter()
            .zip(&c.kl)
            .map(|(&f, &v)| format!("{:.1},{:.1}", x(f), y(v)))
            .collect();
        writeln!(
            s,
            r#"<polyline points="{}" stroke="{color}" stroke-width="2" fill="none"{dash}/>"#,
            points.join(" ")
        )
        .unwrap();
        let ly = MARGIN + 16.0 * i as f64;
        writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/>"#,
            x1 - 150.0,
            x1 - 126.0
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11">{} {}</text>"#,
            x1 - 120.0,
            ly + 4.0,
            c.method,
            c.order.as_str()
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}
