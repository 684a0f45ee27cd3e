//! Static SVG line chart: one panel per `n`, bounds and gap against `m`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use super::output::CsvRow;

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn polyline(points: &[(f64, f64)], color: &str, dashed: bool) -> String {
    let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let dash = if dashed { r#" stroke-dasharray="6 4""# } else { "" };
    format!(
        r#"<polyline fill="none" stroke="{color}" stroke-width="2"{dash} points="{}"/>"#,
        pts.join(" ")
    )
}

/// Renders bounds and the empirical gap versus `m` (log-scaled axis).
pub fn render_svg(rows: &[CsvRow]) -> String {
    let mut panels: BTreeMap<usize, Vec<&CsvRow>> = BTreeMap::new();
    for r in rows {
        panels.entry(r.n).or_default().push(r);
    }
    let bounds: BTreeSet<&str> = rows.iter().map(|r| r.bound.as_str()).collect();
    let width = MARGIN + panels.len().max(1) as f64 * (PANEL_W + MARGIN);
    let legend_h = 20.0 * (bounds.len() + 1) as f64;
    let height = PANEL_H + 2.0 * MARGIN + legend_h;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);

    for (p, (n, prow)) in panels.iter().enumerate() {
        let x0 = MARGIN + p as f64 * (PANEL_W + MARGIN);
        let y0 = MARGIN;
        let ms: BTreeSet<usize> = prow.iter().map(|r| r.m).collect();
        let (lo, hi) = (
            (*ms.first().unwrap_or(&1) as f64).max(1.0).log2(),
            (*ms.last().unwrap_or(&1) as f64).max(1.0).log2(),
        );
        let ymax = prow
            .iter()
            .flat_map(|r| [r.value, r.gap])
            .filter(|v| v.is_finite())
            .fold(0.0f64, f64::max)
            .max(1e-6)
            * 1.05;
        let ymin = prow.iter().map(|r| r.gap).filter(|v| v.is_finite()).fold(0.0f64, f64::min);
        let sx = |m: usize| {
            let t = if hi > lo { ((m as f64).log2() - lo) / (hi - lo) } else { 0.5 };
            x0 + t * PANEL_W
        };
        let sy = |v: f64| y0 + PANEL_H - (v - ymin) / (ymax - ymin) * PANEL_H;

        let _ = writeln!(
            svg,
            r#"<rect x="{x0}" y="{y0}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">n = {n}</text>"#,
            x0 + PANEL_W / 2.0,
            y0 - 10.0
        );
        for &m in &ms {
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{m}</text>"#,
                sx(m),
                y0 + PANEL_H + 16.0
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">m</text>"#,
            x0 + PANEL_W / 2.0,
            y0 + PANEL_H + 32.0
        );
        for k in 0..=4 {
            let v = ymin + (ymax - ymin) * k as f64 / 4.0;
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#,
                x0 - 4.0,
                sy(v) + 4.0
            );
        }
        for (c, b) in bounds.iter().enumerate() {
            let mut pts: Vec<(usize, f64)> = prow.iter().filter(|r| r.bound == *b).map(|r| (r.m, r.value)).collect();
            pts.sort_by_key(|p| p.0);
            if !pts.is_empty() {
                let line: Vec<(f64, f64)> = pts.iter().map(|&(m, v)| (sx(m), sy(v))).collect();
                let _ = writeln!(svg, "{}", polyline(&line, COLORS[c % COLORS.len()], false));
            }
        }
        let gaps: BTreeMap<usize, f64> = prow.iter().map(|r| (r.m, r.gap)).collect();
        let line: Vec<(f64, f64)> = gaps.iter().map(|(&m, &g)| (sx(m), sy(g))).collect();
        let _ = writeln!(svg, "{}", polyline(&line, "black", true));
    }

    let ly = PANEL_H + 2.0 * MARGIN;
    for (c, b) in bounds.iter().enumerate() {
        let y = ly + 20.0 * c as f64;
        let color = COLORS[c % COLORS.len()];
        let _ = writeln!(
            svg,
            r#"<line x1="{MARGIN}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{b}</text>"#,
            MARGIN + 24.0,
            MARGIN + 30.0,
            y + 4.0
        );
    }
    let y = ly + 20.0 * bounds.len() as f64;
    let _ = writeln!(
        svg,
        r#"<line x1="{MARGIN}" y1="{y}" x2="{}" y2="{y}" stroke="black" stroke-width="2" stroke-dasharray="6 4"/><text x="{}" y="{}">empirical gap</text>"#,
        MARGIN + 24.0,
        MARGIN + 30.0,
        y + 4.0
    );
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(n: usize, m: usize, bound: &str, value: f64) -> CsvRow {
        CsvRow {
            config_hash: "x".into(),
            n,
            m,
            t1: 1,
            t2: 1,
            trainer: "joint-sgld".into(),
            bound: bound.into(),
            value,
            empirical_risk: 0.0,
            gap: value / 2.0,
            gap_std_err: 0.0,
            failures: 0,
        }
    }

    #[test]
    fn one_panel_per_n_and_one_line_per_bound() {
        let rows = vec![
            row(2, 10, "fast_rate", 0.4),
            row(2, 20, "fast_rate", 0.3),
            row(2, 10, "kl_quad_mi", 0.5),
            row(2, 20, "kl_quad_mi", 0.35),
            row(3, 10, "fast_rate", 0.2),
        ];
        let svg = render_svg(&rows);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("n = ").count(), 2);
        // Two bound lines + gap on panel n=2; one + gap on n=3.
        assert_eq!(svg.matches("<polyline").count(), 5);
        assert!(svg.contains("kl_quad_mi") && svg.contains("empirical gap"));
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn empty_input_still_renders() {
        let svg = render_svg(&[]);
        assert!(svg.contains("</svg>"));
    }
}
