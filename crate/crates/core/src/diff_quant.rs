//! Quantization overhead: added non-GEMM operators, DQRQ counts and the
//! latency shift between GEMM and non-GEMM work.
//!
//! Latency ratios are quantized/baseline, so a 38.2% reduction reads 0.618.
//! The reciprocal is reported too.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::breakdown::{percent_of, Analysis, AttributionView, BreakdownReport};
use crate::diff_fusion::{check_same_model, ratio, DiffError};
use crate::taxonomy::{OperatorGroup, Ruleset, TAG_DQRQ};
use crate::trace_model::Trace;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqPoint {
    pub seq_len: u64,
    pub percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub baseline_nongemm_ops: u64,
    pub quantized_nongemm_ops: u64,
    pub added_nongemm_ops: u64,
    /// added / baseline non-GEMM ops.
    pub added_nongemm_relative: Option<f64>,
    pub dqrq_ops: u64,
    pub gemm_latency_ratio: Option<f64>,
    pub gemm_latency_ratio_inv: Option<f64>,
    pub nongemm_latency_ratio: Option<f64>,
    pub nongemm_latency_ratio_inv: Option<f64>,
    pub before: BreakdownReport,
    pub after: BreakdownReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub series: Option<Vec<SeqPoint>>,
}

fn dqrq_count(a: &Analysis<'_>, view: AttributionView) -> u64 {
    let tagged: BTreeSet<&str> = a
        .trace
        .events
        .iter()
        .filter(|e| a.ruleset.name_has_tag(&e.name, TAG_DQRQ))
        .map(|e| e.name.as_str())
        .collect();
    a.nongemm_instances(view).iter().filter(|(n, _)| tagged.contains(n.as_str())).map(|(_, c)| c).sum()
}

/// Compares on the combined view.
pub fn quant_diff(baseline: &Trace, quantized: &Trace, ruleset: &Ruleset, force: bool) -> Result<QuantReport, DiffError> {
    check_same_model(baseline, quantized, force)?;
    let view = AttributionView::Combined;
    let base = Analysis::new(baseline, ruleset)?;
    let quant = Analysis::new(quantized, ruleset)?;
    let before = base.breakdown(view, 5)?;
    let after = quant.breakdown(view, 5)?;
    let b_ops = before.nongemm_count();
    if b_ops == 0 {
        return Err(DiffError::EmptyBaseline);
    }
    let q_ops = after.nongemm_count();
    let added = q_ops.saturating_sub(b_ops);
    Ok(QuantReport {
        baseline_nongemm_ops: b_ops,
        quantized_nongemm_ops: q_ops,
        added_nongemm_ops: added,
        added_nongemm_relative: ratio(added, b_ops),
        dqrq_ops: dqrq_count(&quant, view),
        gemm_latency_ratio: ratio(after.gemm_us(), before.gemm_us()),
        gemm_latency_ratio_inv: ratio(before.gemm_us(), after.gemm_us()),
        nongemm_latency_ratio: ratio(after.nongemm_us(), before.nongemm_us()),
        nongemm_latency_ratio_inv: ratio(before.nongemm_us(), after.nongemm_us()),
        before,
        after,
        series: None,
    })
}

/// Share of combined latency spent in `group`, per sequence length, sorted.
pub fn seq_scaling_series(traces: &[(u64, Trace)], ruleset: &Ruleset, group: OperatorGroup) -> Result<Vec<SeqPoint>, DiffError> {
    if traces.len() < 2 {
        return Err(DiffError::TooFewPoints(traces.len()));
    }
    let mut seen = BTreeSet::new();
    for (s, _) in traces {
        if !seen.insert(*s) {
            return Err(DiffError::DuplicateSeqLen(*s));
        }
    }
    let mut out = traces
        .iter()
        .map(|(s, t)| {
            let r = Analysis::new(t, ruleset)?.breakdown(AttributionView::Combined, 1)?;
            Ok(SeqPoint { seq_len: *s, percent: percent_of(r.latency(group), r.total_us) })
        })
        .collect::<Result<Vec<_>, DiffError>>()?;
    out.sort_by_key(|p| p.seq_len);
    Ok(out)
}

/// Arithmetic mean over studies, each report weighted equally.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantStudyMean {
    pub pairs: usize,
    pub nongemm_percent_before: f64,
    pub nongemm_percent_after: f64,
    pub gemm_latency_ratio: f64,
    pub nongemm_latency_ratio: f64,
    pub added_nongemm_ops: f64,
}

/// Undefined ratios are skipped in their own mean.
pub fn mean_quant(reports: &[QuantReport]) -> Result<QuantStudyMean, DiffError> {
    if reports.is_empty() {
        return Err(DiffError::EmptyStudy);
    }
    let n = reports.len() as f64;
    let mean_opt = |f: fn(&QuantReport) -> Option<f64>| {
        let v: Vec<f64> = reports.iter().filter_map(f).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(QuantStudyMean {
        pairs: reports.len(),
        nongemm_percent_before: reports.iter().map(|r| r.before.nongemm_percent()).sum::<f64>() / n,
        nongemm_percent_after: reports.iter().map(|r| r.after.nongemm_percent()).sum::<f64>() / n,
        gemm_latency_ratio: mean_opt(|r| r.gemm_latency_ratio),
        nongemm_latency_ratio: mean_opt(|r| r.nongemm_latency_ratio),
        added_nongemm_ops: reports.iter().map(|r| r.added_nongemm_ops as f64).sum::<f64>() / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace_model::{EventKind, OperatorEvent};

    fn seq(names: &[(&str, u64)]) -> Trace {
        let mut t = 0;
        Trace::new(
            names
                .iter()
                .enumerate()
                .map(|(i, (n, d))| {
                    let e = OperatorEvent::new(i as u64 + 1, *n, EventKind::CpuOp, t, *d).on_track(1, 1);
                    t += d;
                    e
                })
                .collect(),
        )
    }

    #[test]
    fn identity() {
        let t = seq(&[("aten::linear", 10), ("aten::gelu", 4)]);
        let r = quant_diff(&t, &t, &Ruleset::builtin(), false).unwrap();
        assert_eq!(r.added_nongemm_ops, 0);
        assert_eq!(r.added_nongemm_relative, Some(0.0));
        assert_eq!((r.gemm_latency_ratio, r.nongemm_latency_ratio), (Some(1.0), Some(1.0)));
        assert_eq!(r.dqrq_ops, 0);
    }

    #[test]
    fn ten_linears_wrapped() {
        let base: Vec<(&str, u64)> = (0..10).flat_map(|_| [("aten::linear", 10), ("aten::relu", 2)]).collect();
        let quant: Vec<(&str, u64)> = (0..10)
            .flat_map(|_| [("aten::quantize_per_tensor", 1), ("aten::linear", 5), ("aten::dequantize", 1), ("aten::relu", 2)])
            .collect();
        let r = quant_diff(&seq(&base), &seq(&quant), &Ruleset::builtin(), false).unwrap();
        assert_eq!(r.dqrq_ops, 20);
        assert_eq!(r.added_nongemm_ops, 20);
        assert_eq!(r.added_nongemm_relative, Some(2.0));
        assert_eq!(r.gemm_latency_ratio, Some(0.5));
        assert_eq!(r.gemm_latency_ratio_inv, Some(2.0));
        assert_eq!(r.nongemm_latency_ratio, Some(2.0));
    }

    #[test]
    fn added_ops_ignore_order() {
        let a = seq(&[("aten::linear", 3), ("aten::add", 1)]);
        let b1 = seq(&[("aten::add", 1), ("aten::linear", 3), ("aten::mul", 1), ("aten::view", 2)]);
        let b2 = seq(&[("aten::view", 2), ("aten::mul", 1), ("aten::add", 1), ("aten::linear", 3)]);
        let rs = Ruleset::builtin();
        assert_eq!(quant_diff(&a, &b1, &rs, false).unwrap().added_nongemm_ops, 2);
        assert_eq!(quant_diff(&a, &b2, &rs, false).unwrap().added_nongemm_ops, 2);
    }

    #[test]
    fn series_sorted_and_checked() {
        let rs = Ruleset::builtin();
        let pts = vec![
            (8192, seq(&[("aten::linear", 1), ("aten::add", 3)])),
            (512, seq(&[("aten::linear", 3), ("aten::add", 1)])),
        ];
        let s = seq_scaling_series(&pts, &rs, OperatorGroup::ElementwiseArithmetic).unwrap();
        assert_eq!(s, vec![SeqPoint { seq_len: 512, percent: 25.0 }, SeqPoint { seq_len: 8192, percent: 75.0 }]);
        let dup = vec![(1, seq(&[("aten::add", 1)])), (1, seq(&[("aten::add", 1)]))];
        assert!(matches!(seq_scaling_series(&dup, &rs, OperatorGroup::Gemm), Err(DiffError::DuplicateSeqLen(1))));
        assert!(matches!(seq_scaling_series(&dup[..1], &rs, OperatorGroup::Gemm), Err(DiffError::TooFewPoints(1))));
    }

    #[test]
    fn study_mean() {
        let rs = Ruleset::builtin();
        let a = seq(&[("aten::linear", 10), ("aten::add", 10)]);
        let b = seq(&[("aten::linear", 5), ("aten::add", 30), ("aten::quantize_per_tensor", 5)]);
        let r = quant_diff(&a, &b, &rs, false).unwrap();
        let m = mean_quant(&[r.clone(), r]).unwrap();
        assert_eq!(m.pairs, 2);
        assert_eq!(m.nongemm_percent_before, 50.0);
        assert_eq!(m.gemm_latency_ratio, 0.5);
        assert_eq!(m.nongemm_latency_ratio, 3.5);
        assert!(mean_quant(&[]).is_err());
    }
}
