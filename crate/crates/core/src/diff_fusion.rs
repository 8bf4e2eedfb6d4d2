//! Fusion analysis between a baseline trace and an optimized trace.
//!
//! The optimized runtime usually cannot be aligned event by event with the
//! baseline, so absorption is measured as a multiset difference on
//! classified op names. A non-GEMM op name whose count drops contributes the
//! drop to the absorbed total.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::breakdown::{Analysis, AttributionView, BreakdownError, BreakdownReport};
use crate::taxonomy::{OperatorGroup, Ruleset};
use crate::trace_model::{EventKind, Trace, TraceError};

pub const DEFAULT_DELIMITERS: [&str; 3] = ["+", "_fused_", "·"];

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("traces are from different models ('{a}' vs '{b}'); pass --force to compare anyway")]
    ModelMismatch { a: String, b: String },
    #[error("baseline trace has no non-GEMM operators")]
    EmptyBaseline,
    #[error("sequence length {0} appears more than once")]
    DuplicateSeqLen(u64),
    #[error("a sequence series needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("no reports to average")]
    EmptyStudy,
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Breakdown(#[from] BreakdownError),
}

/// Fails when both traces name a model and the names differ.
pub(crate) fn check_same_model(a: &Trace, b: &Trace, force: bool) -> Result<(), DiffError> {
    match (&a.meta.model, &b.meta.model) {
        (Some(x), Some(y)) if x != y && !force => Err(DiffError::ModelMismatch { a: x.clone(), b: y.clone() }),
        _ => Ok(()),
    }
}

pub(crate) fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountBasis {
    /// Every operator instance counts once.
    #[default]
    Instances,
    /// Each distinct op name counts once; a name is fused when it is gone
    /// from the optimized trace.
    Types,
}

impl fmt::Display for CountBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CountBasis::Instances => "instances",
            CountBasis::Types => "types",
        })
    }
}

impl FromStr for CountBasis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "instances" | "instance" => Ok(CountBasis::Instances),
            "types" | "type" => Ok(CountBasis::Types),
            other => Err(format!("unknown count basis '{other}' (expected instances or types)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FusionOptions {
    pub basis: CountBasis,
    pub view: AttributionView,
    pub force: bool,
    pub delimiters: Vec<String>,
    pub top_k: usize,
}

impl Default for FusionOptions {
    fn default() -> Self {
        Self {
            basis: CountBasis::Instances,
            view: AttributionView::Combined,
            force: false,
            delimiters: DEFAULT_DELIMITERS.iter().map(|s| s.to_string()).collect(),
            top_k: 5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PatternSplit {
    pub fused_with_gemm: u64,
    pub fused_with_nongemm: u64,
    /// fused_with_gemm / (fused_with_gemm + fused_with_nongemm).
    pub fused_with_gemm_share: f64,
    pub fused_with_gemm_latency_share: f64,
    /// Events without any delimiter, left out of the split.
    pub unfused: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub basis: CountBasis,
    pub nongemm_fusion_rate: f64,
    pub baseline_nongemm: u64,
    pub absorbed_total: u64,
    pub gemm_speedup: Option<f64>,
    pub nongemm_speedup: Option<f64>,
    /// 1 − fused/baseline non-GEMM latency, as a fraction.
    pub nongemm_latency_reduction: Option<f64>,
    pub absorbed_ops: BTreeMap<String, u64>,
    pub pattern_split: PatternSplit,
    pub before: BreakdownReport,
    pub after: BreakdownReport,
}

/// Splits `name` on every delimiter. Returns `None` when no delimiter occurs.
pub fn constituents<'a>(name: &'a str, delimiters: &[String]) -> Option<Vec<&'a str>> {
    let mut parts = vec![name];
    let mut split = false;
    for d in delimiters.iter().filter(|d| !d.is_empty()) {
        let mut next = Vec::new();
        for p in parts {
            let mut pieces = p.split(d.as_str()).peekable();
            let first = pieces.next().unwrap_or("");
            if pieces.peek().is_some() {
                split = true;
            }
            next.push(first);
            next.extend(pieces);
        }
        parts = next;
    }
    split.then(|| parts.into_iter().map(str::trim).filter(|s| !s.is_empty()).collect())
}

pub fn classify_fusion_patterns(fused: &Trace, ruleset: &Ruleset, delimiters: &[String]) -> Result<PatternSplit, DiffError> {
    let a = Analysis::new(fused, ruleset)?;
    Ok(pattern_split(&a, delimiters))
}

fn pattern_split(a: &Analysis<'_>, delimiters: &[String]) -> PatternSplit {
    let mut split = PatternSplit::default();
    let (mut gemm_us, mut fused_us) = (0u64, 0u64);
    for ev in &a.trace.events {
        let latency = match ev.kind {
            EventKind::CpuOp => a.tree.self_time(ev.id).unwrap_or(0),
            EventKind::GpuKernel => ev.duration_us,
            _ => continue,
        };
        let Some(parts) = constituents(&ev.name, delimiters) else {
            split.unfused += 1;
            continue;
        };
        fused_us += latency;
        if parts.iter().any(|p| a.ruleset.classify_name(p) == OperatorGroup::Gemm) {
            split.fused_with_gemm += 1;
            gemm_us += latency;
        } else {
            split.fused_with_nongemm += 1;
        }
    }
    let fused = split.fused_with_gemm + split.fused_with_nongemm;
    split.fused_with_gemm_share = ratio(split.fused_with_gemm, fused).unwrap_or(0.0);
    split.fused_with_gemm_latency_share = ratio(gemm_us, fused_us).unwrap_or(0.0);
    split
}

pub fn fusion_rate(baseline: &Trace, fused: &Trace, ruleset: &Ruleset, opts: &FusionOptions) -> Result<FusionReport, DiffError> {
    check_same_model(baseline, fused, opts.force)?;
    let base = Analysis::new(baseline, ruleset)?;
    let opt = Analysis::new(fused, ruleset)?;
    let before_counts = base.nongemm_instances(opts.view);
    let after_counts = opt.nongemm_instances(opts.view);
    let baseline_nongemm: u64 = before_counts.values().sum();
    if baseline_nongemm == 0 {
        return Err(DiffError::EmptyBaseline);
    }

    let absorbed_ops: BTreeMap<String, u64> = before_counts
        .iter()
        .filter_map(|(name, &n)| {
            let left = after_counts.get(name).copied().unwrap_or(0);
            (n > left).then(|| (name.clone(), n - left))
        })
        .collect();
    let absorbed_total: u64 = absorbed_ops.values().sum();
    let rate = match opts.basis {
        CountBasis::Instances => absorbed_total as f64 / baseline_nongemm as f64,
        CountBasis::Types => {
            let gone = before_counts.keys().filter(|n| !after_counts.contains_key(*n)).count();
            gone as f64 / before_counts.len() as f64
        }
    };

    let before = base.breakdown(opts.view, opts.top_k)?;
    let after = opt.breakdown(opts.view, opts.top_k)?;
    Ok(FusionReport {
        basis: opts.basis,
        nongemm_fusion_rate: rate,
        baseline_nongemm,
        absorbed_total,
        gemm_speedup: ratio(before.gemm_us(), after.gemm_us()),
        nongemm_speedup: ratio(before.nongemm_us(), after.nongemm_us()),
        nongemm_latency_reduction: ratio(after.nongemm_us(), before.nongemm_us()).map(|r| 1.0 - r),
        absorbed_ops,
        pattern_split: pattern_split(&opt, &opts.delimiters),
        before,
        after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace_model::OperatorEvent;

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

    fn delims() -> Vec<String> {
        DEFAULT_DELIMITERS.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn thirty_of_hundred_absorbed() {
        let mut base: Vec<(&str, u64)> = vec![("aten::conv2d", 100)];
        base.extend(std::iter::repeat_n(("aten::relu", 2), 60));
        base.extend(std::iter::repeat_n(("aten::add", 1), 40));
        let mut fused: Vec<(&str, u64)> = vec![("aten::conv2d", 100)];
        fused.extend(std::iter::repeat_n(("aten::relu", 2), 40));
        fused.extend(std::iter::repeat_n(("aten::add", 1), 30));
        let r = fusion_rate(&seq(&base), &seq(&fused), &Ruleset::builtin(), &FusionOptions::default()).unwrap();
        assert_eq!(r.nongemm_fusion_rate, 0.30);
        assert_eq!(r.absorbed_ops["aten::relu"], 20);
        assert_eq!(r.absorbed_ops["aten::add"], 10);
        assert_eq!(r.gemm_speedup, Some(1.0));
        assert_eq!(r.nongemm_speedup, Some(160.0 / 110.0));
    }

    #[test]
    fn identical_traces() {
        let t = seq(&[("aten::linear", 5), ("aten::gelu", 3), ("aten::view", 1)]);
        let r = fusion_rate(&t, &t, &Ruleset::builtin(), &FusionOptions::default()).unwrap();
        assert_eq!(r.nongemm_fusion_rate, 0.0);
        assert_eq!((r.gemm_speedup, r.nongemm_speedup), (Some(1.0), Some(1.0)));
        assert!(r.absorbed_ops.is_empty());
        assert_eq!(r.nongemm_latency_reduction, Some(0.0));
    }

    #[test]
    fn type_basis_counts_vanished_names() {
        let base = seq(&[("aten::relu", 1), ("aten::relu", 1), ("aten::add", 1), ("aten::view", 1)]);
        let fused = seq(&[("aten::relu", 1), ("aten::view", 1)]);
        let opts = FusionOptions { basis: CountBasis::Types, ..Default::default() };
        let r = fusion_rate(&base, &fused, &Ruleset::builtin(), &opts).unwrap();
        assert!((r.nongemm_fusion_rate - 1.0 / 3.0).abs() < 1e-12);
        let inst = fusion_rate(&base, &fused, &Ruleset::builtin(), &FusionOptions::default()).unwrap();
        assert_eq!(inst.nongemm_fusion_rate, 0.5);
    }

    #[test]
    fn model_mismatch_and_force() {
        let mut a = seq(&[("aten::relu", 1)]);
        let mut b = a.clone();
        a.meta.model = Some("detr".into());
        b.meta.model = Some("segformer".into());
        let rs = Ruleset::builtin();
        assert!(matches!(fusion_rate(&a, &b, &rs, &FusionOptions::default()), Err(DiffError::ModelMismatch { .. })));
        assert!(fusion_rate(&a, &b, &rs, &FusionOptions { force: true, ..Default::default() }).is_ok());
        let gemm_only = seq(&[("aten::mm", 1)]);
        assert!(matches!(fusion_rate(&gemm_only, &gemm_only, &rs, &FusionOptions::default()), Err(DiffError::EmptyBaseline)));
    }

    #[test]
    fn constituent_splitting() {
        let d = delims();
        assert_eq!(constituents("Conv+BN+ReLU", &d), Some(vec!["Conv", "BN", "ReLU"]));
        assert_eq!(constituents("add_fused_layer_norm", &d), Some(vec!["add", "layer_norm"]));
        assert_eq!(constituents("mul·sigmoid", &d), Some(vec!["mul", "sigmoid"]));
        assert_eq!(constituents("aten::relu", &d), None);
    }

    #[test]
    fn patterns() {
        let t = seq(&[("Conv+BN+ReLU", 30), ("Add+LayerNorm", 10), ("aten::relu", 5), ("gelu_fused_mul", 10)]);
        let s = classify_fusion_patterns(&t, &Ruleset::builtin(), &delims()).unwrap();
        assert_eq!((s.fused_with_gemm, s.fused_with_nongemm, s.unfused), (1, 2, 1));
        assert!((s.fused_with_gemm_share - 1.0 / 3.0).abs() < 1e-12);
        assert!((s.fused_with_gemm_latency_share - 0.6).abs() < 1e-12);
    }
}
