//! Serialization of analysis results.
//!
//! Every report kind can be written as CSV, versioned JSON
//! (`opchar-report/v1`), Markdown, or tab-separated plot data. Breakdown
//! series can also be drawn as a stacked-bar SVG.
//!
//! CSV columns:
//!
//! | kind | columns |
//! |------|---------|
//! | breakdown | `label,view,group,latency_us,percent,op_count` |
//! | fusion | `basis,fusion_rate,baseline_nongemm,absorbed,gemm_speedup,nongemm_speedup,nongemm_latency_reduction,fused_with_gemm,fused_with_nongemm,fused_with_gemm_share,fused_with_gemm_latency_share,unfused` |
//! | quant | `baseline_nongemm_ops,quantized_nongemm_ops,added_nongemm_ops,added_nongemm_relative,dqrq_ops,gemm_latency_ratio,gemm_latency_ratio_inv,nongemm_latency_ratio,nongemm_latency_ratio_inv,nongemm_percent_before,nongemm_percent_after` |
//! | series | `seq_len,group,percent` |
//! | memory | `label,arch,batch,seq_len,weights_bytes,kv_cache_bytes,activation_bytes,ssm_state_bytes,overhead_bytes,total_bytes,total_gb,budget_bytes,s_max,flag,ratio_vs_transformer` |
//!
//! Undefined values are empty cells.

mod svg;

use std::fmt::{self, Display, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::breakdown::{BreakdownReport, PhaseMetrics};
use crate::diff_fusion::FusionReport;
use crate::diff_quant::{QuantReport, SeqPoint};
use crate::memmodel::{decimal_gb, ArchKind, LimitFlag, MemFootprint, SeqLimit};
use crate::taxonomy::OperatorGroup;

pub use svg::{group_color, render_svg, PALETTE};

pub const REPORT_SCHEMA: &str = "opchar-report/v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
    Md,
    Svg,
    PlotData,
}

impl Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Csv => "csv",
            Format::Json => "json",
            Format::Md => "md",
            Format::Svg => "svg",
            Format::PlotData => "plotdata",
        })
    }
}

impl FromStr for Format {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "md" | "markdown" => Ok(Format::Md),
            "svg" => Ok(Format::Svg),
            "plotdata" | "tsv" => Ok(Format::PlotData),
            other => Err(ReportError::UnsupportedFormat { format: other.to_string(), kind: None }),
        }
    }
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
            Format::Md => "md",
            Format::Svg => "svg",
            Format::PlotData => "tsv",
        }
    }
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("unsupported format '{format}'{}", kind.map(|k| format!(" for {k} reports")).unwrap_or_default())]
    UnsupportedFormat { format: String, kind: Option<&'static str> },
    #[error("report schema mismatch: found '{found}', expected '{REPORT_SCHEMA}'")]
    SchemaMismatch { found: String },
    #[error("unknown report kind '{0}'")]
    UnknownKind(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemRow {
    pub label: String,
    pub arch: ArchKind,
    pub batch: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub footprint: Option<MemFootprint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<SeqLimit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio_vs_transformer: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_bytes: Option<u128>,
    pub rows: Vec<MemRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesReport {
    pub group: OperatorGroup,
    pub points: Vec<SeqPoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Report {
    Breakdown(Vec<BreakdownReport>),
    Fusion(Box<FusionReport>),
    Quant(Box<QuantReport>),
    Series(SeriesReport),
    Memory(MemoryReport),
}

impl Report {
    pub fn kind(&self) -> &'static str {
        match self {
            Report::Breakdown(_) => "breakdown",
            Report::Fusion(_) => "fusion",
            Report::Quant(_) => "quant",
            Report::Series(_) => "series",
            Report::Memory(_) => "memory",
        }
    }
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema: &'static str,
    kind: &'static str,
    data: &'a T,
}

#[derive(Deserialize)]
struct RawEnvelope {
    schema: String,
    kind: String,
    data: serde_json::Value,
}

fn json_bytes<T: Serialize>(kind: &'static str, data: &T) -> Result<Vec<u8>, ReportError> {
    let mut out = serde_json::to_vec_pretty(&Envelope { schema: REPORT_SCHEMA, kind, data })?;
    out.push(b'\n');
    Ok(out)
}

/// Reads a report previously written with [`Format::Json`].
pub fn parse_json(bytes: &[u8]) -> Result<Report, ReportError> {
    let raw: RawEnvelope = serde_json::from_slice(bytes)?;
    if raw.schema != REPORT_SCHEMA {
        return Err(ReportError::SchemaMismatch { found: raw.schema });
    }
    Ok(match raw.kind.as_str() {
        "breakdown" => Report::Breakdown(serde_json::from_value(raw.data)?),
        "fusion" => Report::Fusion(serde_json::from_value(raw.data)?),
        "quant" => Report::Quant(serde_json::from_value(raw.data)?),
        "series" => Report::Series(serde_json::from_value(raw.data)?),
        "memory" => Report::Memory(serde_json::from_value(raw.data)?),
        other => return Err(ReportError::UnknownKind(other.to_string())),
    })
}

fn opt<T: Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn flag_str(f: Option<LimitFlag>) -> &'static str {
    match f {
        None => "",
        Some(LimitFlag::FixedExceedsBudget) => "fixed-exceeds-budget",
        Some(LimitFlag::SequenceIndependent) => "sequence-independent",
        Some(LimitFlag::Capped) => "capped",
    }
}

fn csv_bytes(report: &Report) -> Result<Vec<u8>, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    match report {
        Report::Breakdown(list) => {
            w.write_record(["label", "view", "group", "latency_us", "percent", "op_count"])?;
            for (i, r) in list.iter().enumerate() {
                let label = bar_label(r, i);
                for (g, s) in &r.per_group {
                    w.write_record([
                        label.clone(),
                        r.view.to_string(),
                        g.to_string(),
                        s.latency_us.to_string(),
                        s.percent.to_string(),
                        s.op_count.to_string(),
                    ])?;
                }
            }
        }
        Report::Fusion(f) => {
            let s = &f.pattern_split;
            w.write_record([
                "basis",
                "fusion_rate",
                "baseline_nongemm",
                "absorbed",
                "gemm_speedup",
                "nongemm_speedup",
                "nongemm_latency_reduction",
                "fused_with_gemm",
                "fused_with_nongemm",
                "fused_with_gemm_share",
                "fused_with_gemm_latency_share",
                "unfused",
            ])?;
            w.write_record([
                f.basis.to_string(),
                f.nongemm_fusion_rate.to_string(),
                f.baseline_nongemm.to_string(),
                f.absorbed_total.to_string(),
                opt(f.gemm_speedup),
                opt(f.nongemm_speedup),
                opt(f.nongemm_latency_reduction),
                s.fused_with_gemm.to_string(),
                s.fused_with_nongemm.to_string(),
                s.fused_with_gemm_share.to_string(),
                s.fused_with_gemm_latency_share.to_string(),
                s.unfused.to_string(),
            ])?;
        }
        Report::Quant(q) => {
            w.write_record([
                "baseline_nongemm_ops",
                "quantized_nongemm_ops",
                "added_nongemm_ops",
                "added_nongemm_relative",
                "dqrq_ops",
                "gemm_latency_ratio",
                "gemm_latency_ratio_inv",
                "nongemm_latency_ratio",
                "nongemm_latency_ratio_inv",
                "nongemm_percent_before",
                "nongemm_percent_after",
            ])?;
            w.write_record([
                q.baseline_nongemm_ops.to_string(),
                q.quantized_nongemm_ops.to_string(),
                q.added_nongemm_ops.to_string(),
                opt(q.added_nongemm_relative),
                q.dqrq_ops.to_string(),
                opt(q.gemm_latency_ratio),
                opt(q.gemm_latency_ratio_inv),
                opt(q.nongemm_latency_ratio),
                opt(q.nongemm_latency_ratio_inv),
                q.before.nongemm_percent().to_string(),
                q.after.nongemm_percent().to_string(),
            ])?;
        }
        Report::Series(s) => {
            w.write_record(["seq_len", "group", "percent"])?;
            for p in &s.points {
                w.write_record([p.seq_len.to_string(), s.group.to_string(), p.percent.to_string()])?;
            }
        }
        Report::Memory(m) => {
            w.write_record([
                "label",
                "arch",
                "batch",
                "seq_len",
                "weights_bytes",
                "kv_cache_bytes",
                "activation_bytes",
                "ssm_state_bytes",
                "overhead_bytes",
                "total_bytes",
                "total_gb",
                "budget_bytes",
                "s_max",
                "flag",
                "ratio_vs_transformer",
            ])?;
            for r in &m.rows {
                let f = r.footprint.as_ref();
                w.write_record([
                    r.label.clone(),
                    r.arch.to_string(),
                    r.batch.to_string(),
                    opt(r.seq_len),
                    opt(f.map(|f| f.weights_bytes)),
                    opt(f.map(|f| f.kv_cache_bytes)),
                    opt(f.map(|f| f.activation_bytes)),
                    opt(f.map(|f| f.ssm_state_bytes)),
                    opt(f.map(|f| f.overhead_bytes)),
                    opt(f.map(|f| f.total_bytes)),
                    opt(f.map(|f| decimal_gb(f.total_bytes))),
                    opt(m.budget_bytes),
                    opt(r.limit.map(|l| l.s_max)),
                    flag_str(r.limit.and_then(|l| l.flag)).to_string(),
                    opt(r.ratio_vs_transformer),
                ])?;
            }
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?)
}

pub(crate) fn bar_label(r: &BreakdownReport, i: usize) -> String {
    r.label.clone().or_else(|| r.meta.model.clone()).unwrap_or_else(|| format!("trace{}", i + 1))
}

fn ms(us: u64) -> String {
    format!("{:.3}", us as f64 / 1000.0)
}

fn fx(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "n/a".into())
}

fn md_phases(out: &mut String, m: &PhaseMetrics) {
    let _ = writeln!(out, "\n| Phase metric | Value |\n|---|---|");
    let _ = writeln!(out, "| TTFT (ms) | {} |", ms(m.ttft_us));
    let _ = writeln!(out, "| TPOT (ms) | {} |", fx(m.tpot_us.map(|t| t / 1000.0), 3));
    let _ = writeln!(out, "| Decode throughput (tok/s) | {} |", fx(m.decode_throughput_tok_per_s, 2));
    let _ = writeln!(out, "| End-to-end throughput (tok/s) | {} |", fx(m.e2e_throughput_tok_per_s, 2));
    let _ = writeln!(out, "| Decode tokens | {} |", m.n_decode_tokens);
    let _ = writeln!(out, "| Energy (J) | {} |", fx(m.energy_j, 3));
}

fn md_breakdown(out: &mut String, r: &BreakdownReport, i: usize) {
    let _ = writeln!(out, "## {} ({} view)\n", bar_label(r, i), r.view);
    let _ = writeln!(out, "Total {} ms, non-GEMM {:.2}%.", ms(r.total_us), r.nongemm_percent());
    if r.exceeds_wall_clock() {
        let _ = writeln!(out, "CPU and GPU time are summed; the total exceeds the {} ms wall-clock span.", ms(r.wall_us));
    }
    if r.sync_wait_us > 0 {
        let _ = writeln!(out, "Synchronization waits: {} ms (in Uncategorized).", ms(r.sync_wait_us));
    }
    let _ = writeln!(out, "\n| Group | Latency (ms) | % | Ops |\n|---|---:|---:|---:|");
    for (g, s) in &r.per_group {
        let _ = writeln!(out, "| {g} | {} | {:.2} | {} |", ms(s.latency_us), s.percent, s.op_count);
    }
    if !r.top_nongemm.is_empty() {
        let _ = writeln!(out, "\n| Non-GEMM op | Group | Latency (ms) | % | Count |\n|---|---|---:|---:|---:|");
        for t in &r.top_nongemm {
            let _ = writeln!(out, "| `{}` | {} | {} | {:.2} | {} |", t.name.replace('|', "\\|"), t.group, ms(t.latency_us), t.percent, t.count);
        }
    }
    if let Some(m) = &r.phase_metrics {
        md_phases(out, m);
    }
    out.push('\n');
}

fn md_bytes(report: &Report) -> Vec<u8> {
    let mut out = String::new();
    match report {
        Report::Breakdown(list) => {
            let _ = writeln!(out, "# Latency breakdown\n");
            for (i, r) in list.iter().enumerate() {
                md_breakdown(&mut out, r, i);
            }
        }
        Report::Fusion(f) => {
            let s = &f.pattern_split;
            let _ = writeln!(out, "# Fusion report\n\n| Metric | Value |\n|---|---:|");
            let _ = writeln!(out, "| Non-GEMM fusion rate ({}) | {:.2}% |", f.basis, f.nongemm_fusion_rate * 100.0);
            let _ = writeln!(out, "| Baseline non-GEMM ops | {} |", f.baseline_nongemm);
            let _ = writeln!(out, "| Absorbed ops | {} |", f.absorbed_total);
            let _ = writeln!(out, "| GEMM speedup | {}x |", fx(f.gemm_speedup, 3));
            let _ = writeln!(out, "| Non-GEMM speedup | {}x |", fx(f.nongemm_speedup, 3));
            let _ = writeln!(out, "| Non-GEMM latency reduction | {}% |", fx(f.nongemm_latency_reduction.map(|r| r * 100.0), 2));
            let _ = writeln!(out, "| Non-GEMM share before | {:.2}% |", f.before.nongemm_percent());
            let _ = writeln!(out, "| Non-GEMM share after | {:.2}% |", f.after.nongemm_percent());
            let _ = writeln!(out, "| Fused with GEMM | {} ({:.2}%) |", s.fused_with_gemm, s.fused_with_gemm_share * 100.0);
            let _ = writeln!(out, "| Fused with non-GEMM only | {} |", s.fused_with_nongemm);
            let _ = writeln!(out, "| Fused-with-GEMM latency share | {:.2}% |", s.fused_with_gemm_latency_share * 100.0);
            let _ = writeln!(out, "| Unfused events | {} |", s.unfused);
            if !f.absorbed_ops.is_empty() {
                let _ = writeln!(out, "\n| Absorbed op | Count |\n|---|---:|");
                for (name, n) in &f.absorbed_ops {
                    let _ = writeln!(out, "| `{}` | {n} |", name.replace('|', "\\|"));
                }
            }
        }
        Report::Quant(q) => {
            let _ = writeln!(out, "# Quantization report\n\n| Metric | Value |\n|---|---:|");
            let _ = writeln!(out, "| Baseline non-GEMM ops | {} |", q.baseline_nongemm_ops);
            let _ = writeln!(out, "| Quantized non-GEMM ops | {} |", q.quantized_nongemm_ops);
            let _ = writeln!(out, "| Added non-GEMM ops | {} ({}%) |", q.added_nongemm_ops, fx(q.added_nongemm_relative.map(|r| r * 100.0), 2));
            let _ = writeln!(out, "| Quantize/dequantize ops | {} |", q.dqrq_ops);
            let _ = writeln!(out, "| GEMM latency quantized/baseline | {} |", fx(q.gemm_latency_ratio, 3));
            let _ = writeln!(out, "| GEMM latency baseline/quantized | {} |", fx(q.gemm_latency_ratio_inv, 3));
            let _ = writeln!(out, "| Non-GEMM latency quantized/baseline | {} |", fx(q.nongemm_latency_ratio, 3));
            let _ = writeln!(out, "| Non-GEMM latency baseline/quantized | {} |", fx(q.nongemm_latency_ratio_inv, 3));
            let _ = writeln!(out, "| Non-GEMM share before | {:.2}% |", q.before.nongemm_percent());
            let _ = writeln!(out, "| Non-GEMM share after | {:.2}% |", q.after.nongemm_percent());
            if let Some(series) = &q.series {
                let _ = writeln!(out, "\n| Sequence length | % |\n|---:|---:|");
                for p in series {
                    let _ = writeln!(out, "| {} | {:.2} |", p.seq_len, p.percent);
                }
            }
        }
        Report::Series(s) => {
            let _ = writeln!(out, "# {} share by sequence length\n\n| Sequence length | % |\n|---:|---:|", s.group);
            for p in &s.points {
                let _ = writeln!(out, "| {} | {:.2} |", p.seq_len, p.percent);
            }
        }
        Report::Memory(m) => {
            let _ = writeln!(out, "# Memory model\n");
            if let Some(b) = m.budget_bytes {
                let _ = writeln!(out, "Budget {:.3} GB.\n", decimal_gb(b));
            }
            let _ = writeln!(
                out,
                "| Model | Arch | B | S | Weights (GB) | KV (GB) | Activations (GB) | SSM state (GB) | Overhead (GB) | Total (GB) | S_max | Ratio |\n|---|---|---:|---:|---:|---:|---:|---:|---:|---:|---:|---:|"
            );
            for r in &m.rows {
                let gb = |f: fn(&MemFootprint) -> u128| r.footprint.as_ref().map(|x| format!("{:.3}", decimal_gb(f(x)))).unwrap_or_default();
                let s_max = r
                    .limit
                    .map(|l| match l.flag {
                        Some(f) => format!("{} ({})", l.s_max, flag_str(Some(f))),
                        None => l.s_max.to_string(),
                    })
                    .unwrap_or_default();
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
                    r.label,
                    r.arch,
                    r.batch,
                    opt(r.seq_len),
                    gb(|f| f.weights_bytes),
                    gb(|f| f.kv_cache_bytes),
                    gb(|f| f.activation_bytes),
                    gb(|f| f.ssm_state_bytes),
                    gb(|f| f.overhead_bytes),
                    gb(|f| f.total_bytes),
                    s_max,
                    r.ratio_vs_transformer.map(|x| format!("{x:.2}")).unwrap_or_default(),
                );
            }
        }
    }
    out.into_bytes()
}

fn plot_bars(out: &mut String, bars: &[(String, &BreakdownReport)]) {
    let groups = svg::present_groups(bars.iter().map(|(_, r)| *r));
    out.push_str("label\ttotal_ms");
    for g in &groups {
        let _ = write!(out, "\t{g}_ms\t{g}_pct");
    }
    out.push('\n');
    for (label, r) in bars {
        let _ = write!(out, "{label}\t{}", ms(r.total_us));
        for g in &groups {
            let _ = write!(out, "\t{}\t{:.4}", ms(r.latency(*g)), r.percent(*g));
        }
        out.push('\n');
    }
}

fn plot_bytes(report: &Report) -> Vec<u8> {
    let mut out = String::new();
    match report {
        Report::Breakdown(list) => {
            let bars: Vec<_> = list.iter().enumerate().map(|(i, r)| (bar_label(r, i), r)).collect();
            plot_bars(&mut out, &bars);
        }
        Report::Fusion(f) => plot_bars(&mut out, &[("before".into(), &f.before), ("after".into(), &f.after)]),
        Report::Quant(q) => plot_bars(&mut out, &[("baseline".into(), &q.before), ("quantized".into(), &q.after)]),
        Report::Series(s) => {
            out.push_str("seq_len\tpercent\n");
            for p in &s.points {
                let _ = writeln!(out, "{}\t{:.4}", p.seq_len, p.percent);
            }
        }
        Report::Memory(m) => {
            out.push_str("label\ttotal_gb\ts_max\n");
            for r in &m.rows {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}",
                    r.label,
                    r.footprint.map(|f| format!("{:.4}", decimal_gb(f.total_bytes))).unwrap_or_default(),
                    opt(r.limit.map(|l| l.s_max))
                );
            }
        }
    }
    out.into_bytes()
}

pub fn emit(report: &Report, format: Format) -> Result<Vec<u8>, ReportError> {
    match format {
        Format::Csv => csv_bytes(report),
        Format::Json => match report {
            Report::Breakdown(v) => json_bytes("breakdown", v),
            Report::Fusion(f) => json_bytes("fusion", f),
            Report::Quant(q) => json_bytes("quant", q),
            Report::Series(s) => json_bytes("series", s),
            Report::Memory(m) => json_bytes("memory", m),
        },
        Format::Md => Ok(md_bytes(report)),
        Format::PlotData => Ok(plot_bytes(report)),
        Format::Svg => match report {
            Report::Breakdown(list) => Ok(render_svg(list).into_bytes()),
            other => Err(ReportError::UnsupportedFormat { format: "svg".into(), kind: Some(other.kind()) }),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::breakdown::{compute_breakdown, AttributionView};
    use crate::taxonomy::Ruleset;
    use crate::trace_model::{EventKind, OperatorEvent, Trace};

    fn report(ops: &[(&str, u64)]) -> BreakdownReport {
        let mut t = 0;
        let events = ops
            .iter()
            .enumerate()
            .map(|(i, (n, d))| {
                let e = OperatorEvent::new(i as u64 + 1, *n, EventKind::CpuOp, t, *d).on_track(1, 1);
                t += d;
                e
            })
            .collect();
        compute_breakdown(&Trace::new(events), &Ruleset::builtin(), AttributionView::CpuOnly, 3).unwrap()
    }

    #[test]
    fn csv_three_rows() {
        let r = report(&[("aten::linear", 600), ("aten::view", 300), ("aten::relu", 100)]);
        let text = String::from_utf8(emit(&Report::Breakdown(vec![r]), Format::Csv).unwrap()).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "label,view,group,latency_us,percent,op_count");
        assert_eq!(lines.len(), 4);
        let sum: f64 = lines[1..].iter().map(|l| l.split(',').nth(4).unwrap().parse::<f64>().unwrap()).sum();
        assert!((sum - 100.0).abs() < 1e-9);
    }

    #[test]
    fn empty_report_csv_is_header() {
        let r = report(&[]);
        let text = String::from_utf8(emit(&Report::Breakdown(vec![r]), Format::Csv).unwrap()).unwrap();
        assert_eq!(text, "label,view,group,latency_us,percent,op_count\n");
    }

    #[test]
    fn json_round_trip_is_identity() {
        let mut a = report(&[("aten::linear", 600), ("aten::view", 300), ("aten::relu", 100)]);
        a.label = Some("cpu".into());
        let rep = Report::Breakdown(vec![a, report(&[("aten::softmax", 7)])]);
        let bytes = emit(&rep, Format::Json).unwrap();
        let back = parse_json(&bytes).unwrap();
        assert_eq!(back, rep);
        assert_eq!(emit(&back, Format::Json).unwrap(), bytes);
        assert!(std::str::from_utf8(&bytes).unwrap().contains("\"schema\": \"opchar-report/v1\""));
    }

    #[test]
    fn json_rejects_other_schema() {
        let err = parse_json(br#"{"schema":"opchar-report/v0","kind":"breakdown","data":[]}"#).unwrap_err();
        assert!(matches!(err, ReportError::SchemaMismatch { .. }));
        assert!(matches!(parse_json(br#"{"schema":"opchar-report/v1","kind":"pie","data":[]}"#), Err(ReportError::UnknownKind(_))));
    }

    #[test]
    fn svg_only_for_breakdowns() {
        let rep = Report::Series(SeriesReport { group: OperatorGroup::Gemm, points: vec![] });
        assert!(matches!(emit(&rep, Format::Svg), Err(ReportError::UnsupportedFormat { .. })));
        assert!("pdf".parse::<Format>().is_err());
    }

    #[test]
    fn markdown_and_plotdata_are_deterministic() {
        let rep = Report::Breakdown(vec![report(&[("aten::linear", 600), ("aten::view", 300)])]);
        for f in [Format::Md, Format::PlotData, Format::Svg, Format::Csv, Format::Json] {
            assert_eq!(emit(&rep, f).unwrap(), emit(&rep, f).unwrap());
        }
        let md = String::from_utf8(emit(&rep, Format::Md).unwrap()).unwrap();
        assert!(md.contains("| Memory | 0.300 | 33.33 | 1 |"));
        let tsv = String::from_utf8(emit(&rep, Format::PlotData).unwrap()).unwrap();
        assert_eq!(tsv.lines().next().unwrap(), "label\ttotal_ms\tGemm_ms\tGemm_pct\tMemory_ms\tMemory_pct");
    }
}
