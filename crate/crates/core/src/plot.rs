//! ROC curve plots as standalone SVG documents.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::metrics::RocResult;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22",
    "#17becf",
];

const SIZE: f64 = 420.0;
const MARGIN: f64 = 55.0;
const LEGEND_LINE: f64 = 16.0;

fn px(x: f64) -> f64 {
    MARGIN + x * SIZE
}

fn py(y: f64) -> f64 {
    MARGIN + (1.0 - y) * SIZE
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Legend text: `node  AUC 0.937 (0.924-0.950)`.
pub fn legend_label(r: &RocResult) -> String {
    match (r.auc, r.ci) {
        (Some(a), Some((lo, hi))) => format!("{}  AUC {a:.3} ({lo:.3}-{hi:.3})", r.node),
        (Some(a), None) => format!("{}  AUC {a:.3}", r.node),
        _ => format!("{}  AUC undefined", r.node),
    }
}

/// ROC curves of the defined results in one plot, with shaded bootstrap
/// bands where available.
pub fn roc_svg(title: &str, results: &[&RocResult]) -> String {
    let defined: Vec<&RocResult> = results.iter().copied().filter(|r| r.is_defined()).collect();
    let width = SIZE + 2.0 * MARGIN + 260.0;
    let height = (SIZE + 2.0 * MARGIN).max(MARGIN + LEGEND_LINE * (defined.len() as f64 + 2.0));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">{}</text>"#,
        px(0.5),
        MARGIN / 2.0,
        escape(title)
    );
    for i in 0..=5 {
        let t = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{x}" y1="{y0}" x2="{x}" y2="{y1}" stroke="#e0e0e0"/><line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="#e0e0e0"/>"##,
            x = px(t),
            y = py(t),
            x0 = px(0.0),
            x1 = px(1.0),
            y0 = py(0.0),
            y1 = py(1.0)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{t:.1}</text><text x="{}" y="{}" text-anchor="end">{t:.1}</text>"#,
            px(t),
            py(0.0) + 16.0,
            px(0.0) - 6.0,
            py(t) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r##"<rect x="{}" y="{}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/><line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#999" stroke-dasharray="4 4"/>"##,
        px(0.0),
        py(1.0),
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">False positive rate</text><text x="{}" y="{}" text-anchor="middle" transform="rotate(-90 {} {})">True positive rate</text>"#,
        px(0.5),
        py(0.0) + 36.0,
        MARGIN - 38.0,
        py(0.5),
        MARGIN - 38.0,
        py(0.5)
    );
    for (k, r) in defined.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        if let Some(band) = &r.band {
            let mut pts: Vec<String> = band.iter().map(|(x, _, hi)| format!("{:.2},{:.2}", px(*x), py(*hi))).collect();
            pts.extend(band.iter().rev().map(|(x, lo, _)| format!("{:.2},{:.2}", px(*x), py(*lo))));
            let _ = writeln!(
                s,
                r#"<polygon points="{}" fill="{color}" fill-opacity="0.18" stroke="none"/>"#,
                pts.join(" ")
            );
        }
        let line: Vec<String> = r.points.iter().map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.6"/>"#,
            line.join(" ")
        );
        let ly = MARGIN + LEGEND_LINE * k as f64;
        let lx = px(1.0) + 20.0;
        let _ = writeln!(
            s,
            r#"<rect x="{lx}" y="{}" width="12" height="3" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
            ly - 4.0,
            lx + 18.0,
            ly,
            escape(&legend_label(r))
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn save_roc_svg(path: impl AsRef<Path>, title: &str, results: &[&RocResult]) -> Result<()> {
    std::fs::write(path, roc_svg(title, results))?;
    Ok(())
}
