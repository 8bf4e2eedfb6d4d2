//! Stacked-bar SVG for breakdown series.
//!
//! Each breakdown is one 100%-stacked bar with its total latency in
//! milliseconds above it. Every bar draws one `<rect>` per group present in
//! any bar of the series (zero-height when absent), so bars line up. Legend
//! swatches are paths.

use std::fmt::Write as _;

use crate::breakdown::BreakdownReport;
use crate::taxonomy::OperatorGroup;

use super::bar_label;

/// Fixed group colors, in `OperatorGroup::ALL` order.
pub const PALETTE: [(OperatorGroup, &str); 9] = [
    (OperatorGroup::Gemm, "#4e79a7"),
    (OperatorGroup::Normalization, "#f28e2b"),
    (OperatorGroup::Activation, "#e15759"),
    (OperatorGroup::Memory, "#76b7b2"),
    (OperatorGroup::ElementwiseArithmetic, "#59a14f"),
    (OperatorGroup::RoiSelection, "#edc948"),
    (OperatorGroup::LogitComputation, "#b07aa1"),
    (OperatorGroup::SsmSpecific, "#ff9da7"),
    (OperatorGroup::Uncategorized, "#9c755f"),
];

pub fn group_color(g: OperatorGroup) -> &'static str {
    PALETTE.iter().find(|(x, _)| *x == g).map(|(_, c)| *c).unwrap_or("#000000")
}

pub(crate) fn present_groups<'a>(reports: impl Iterator<Item = &'a BreakdownReport>) -> Vec<OperatorGroup> {
    let mut seen = [false; 9];
    for r in reports {
        for g in r.per_group.keys() {
            seen[OperatorGroup::ALL.iter().position(|x| x == g).unwrap()] = true;
        }
    }
    OperatorGroup::ALL.iter().zip(seen).filter(|(_, s)| *s).map(|(g, _)| *g).collect()
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

const TOP: f64 = 40.0;
const PLOT_H: f64 = 260.0;
const BAR_W: f64 = 60.0;
const STEP: f64 = 100.0;
const LEFT: f64 = 60.0;

pub fn render_svg(reports: &[BreakdownReport]) -> String {
    let groups = present_groups(reports.iter());
    let plot_w = LEFT + STEP * reports.len().max(1) as f64;
    let width = plot_w + 200.0;
    let height = TOP + PLOT_H + 60.0;
    let base = TOP + PLOT_H;
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r##"<path d="M{LEFT} {TOP}V{base}H{plot_w}" fill="none" stroke="#333"/>"##);
    for pct in [0, 25, 50, 75, 100] {
        let y = base - PLOT_H * pct as f64 / 100.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{pct}%</text>"#, LEFT - 6.0, y + 4.0);
    }
    for (i, r) in reports.iter().enumerate() {
        let x = LEFT + 20.0 + STEP * i as f64;
        let mut y = base;
        let _ = writeln!(s, r#"<g class="bar">"#);
        for g in &groups {
            let h = PLOT_H * r.percent(*g) / 100.0;
            y -= h;
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y:.3}" width="{BAR_W}" height="{h:.3}" fill="{}"><title>{}: {:.2}%</title></rect>"#,
                group_color(*g),
                g,
                r.percent(*g)
            );
        }
        let cx = x + BAR_W / 2.0;
        let _ = writeln!(s, r#"<text x="{cx}" y="{:.1}" text-anchor="middle">{:.2}</text>"#, TOP - 8.0, r.total_us as f64 / 1000.0);
        let _ = writeln!(
            s,
            r#"<text x="{cx}" y="{:.1}" text-anchor="middle">{} ({})</text>"#,
            base + 18.0,
            escape(&bar_label(r, i)),
            r.view
        );
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(s, r#"<text x="{LEFT}" y="{:.1}">Latency (ms) above each bar</text>"#, height - 10.0);
    let lx = plot_w + 20.0;
    for (j, g) in groups.iter().enumerate() {
        let ly = TOP + 18.0 * j as f64;
        let _ = writeln!(s, r#"<path d="M{lx} {ly}h12v12h-12z" fill="{}"/>"#, group_color(*g));
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}">{}</text>"#, lx + 18.0, ly + 10.0, g);
    }
    s.push_str("</svg>\n");
    s
}
