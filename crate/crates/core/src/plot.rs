//! Minimal SVG charts: loss curves and the ablation bar chart.

use std::fmt::Write as _;

use crate::pipeline::{AblationTable, EpochMetrics};

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(s: &mut String, y_max: f64, x_label: &str) {
    let (x0, y0, x1, y1) = (PAD, H - PAD, W - PAD / 2.0, PAD);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for k in 0..=4 {
        let v = y_max * k as f64 / 4.0;
        let y = y0 - (y0 - y1) * k as f64 / 4.0;
        let _ = writeln!(s, r##"<line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="#ddd"/>"##);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#, x0 - 4.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, H - 10.0, escape(x_label));
}

/// Per-epoch loss curves (total, focal, size, offset) and validation AP50
/// when present.
pub fn loss_curves_svg(metrics: &[EpochMetrics]) -> String {
    let mut s = header("training losses per epoch");
    let series: Vec<(&str, Vec<f64>)> = vec![
        ("total", metrics.iter().map(|m| m.loss).collect()),
        ("focal", metrics.iter().map(|m| m.focal).collect()),
        ("wh L1", metrics.iter().map(|m| m.wh).collect()),
        ("offset L1", metrics.iter().map(|m| m.off).collect()),
        ("val AP50", metrics.iter().map(|m| m.val.as_ref().map_or(f64::NAN, |v| v.ap50)).collect()),
    ];
    let y_max = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .fold(1e-9, f64::max);
    axes(&mut s, y_max, "epoch");
    let n = metrics.len().max(2) as f64 - 1.0;
    let x = |i: usize| PAD + (W - 1.5 * PAD) * i as f64 / n;
    let y = |v: f64| (H - PAD) - (H - 2.0 * PAD) * v / y_max;
    for (k, (name, vals)) in series.iter().enumerate() {
        let pts: Vec<String> = vals
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, v)| format!("{:.1},{:.1}", x(i), y(*v)))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let c = COLORS[k % COLORS.len()];
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        let ly = PAD + 16.0 * k as f64;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{c}"/>"#, W - 150.0, ly - 9.0);
        let _ = writeln!(s, r#"<text x="{}" y="{ly}">{name}</text>"#, W - 134.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Grouped bars of AP50 and AP_S per neck window.
pub fn ablation_svg(table: &AblationTable) -> String {
    let mut s = header("AP50 and AP_S by neck window size");
    let y_max = table
        .rows
        .iter()
        .flat_map(|r| [r.ap50, r.ap_s])
        .fold(0.0f64, f64::max)
        .max(0.05);
    axes(&mut s, y_max, "neck window size");
    let n = table.rows.len().max(1) as f64;
    let slot = (W - 1.5 * PAD) / n;
    let bw = slot / 3.0;
    let base = H - PAD;
    for (i, r) in table.rows.iter().enumerate() {
        let x0 = PAD + slot * i as f64 + bw / 2.0;
        for (k, v) in [r.ap50, r.ap_s].into_iter().enumerate() {
            let h = (H - 2.0 * PAD) * v / y_max;
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{bw:.1}" height="{h:.1}" fill="{}"><title>{v:.4}</title></rect>"#,
                x0 + bw * k as f64,
                base - h,
                COLORS[k]
            );
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, x0 + bw, base + 16.0, r.window);
    }
    for (k, name) in ["AP50", "AP_S"].iter().enumerate() {
        let ly = PAD + 16.0 * k as f64;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/>"#, W - 110.0, ly - 9.0, COLORS[k]);
        let _ = writeln!(s, r#"<text x="{}" y="{ly}">{name}</text>"#, W - 94.0);
    }
    s.push_str("</svg>\n");
    s
}

/// `epoch,loss,focal,wh,off,loss_ma50,val_ap50,val_ap_s`.
pub fn loss_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,loss,focal,wh,off,loss_ma50,val_ap50,val_ap_s\n");
    for m in metrics {
        let (a, b) = m.val.as_ref().map_or((String::new(), String::new()), |v| (v.ap50.to_string(), v.ap_s.to_string()));
        let _ = writeln!(s, "{},{},{},{},{},{},{a},{b}", m.epoch, m.loss, m.focal, m.wh, m.off, m.loss_ma50);
    }
    s
}
