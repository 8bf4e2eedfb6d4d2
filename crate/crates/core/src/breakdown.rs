//! Latency breakdowns by operator group, top non-GEMM operators, and
//! generation-phase metrics.
//!
//! CPU latency is attributed by self-time, so wrapper ops never double-count
//! their children. GPU latency is the kernel duration, grouped by the
//! kernel's own rule or the group it inherits from its launcher. The
//! combined view adds the two and may exceed wall-clock time when CPU and
//! GPU work overlap; `wall_us` is reported next to `total_us` for that
//! reason.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{classify_trace, ClassifiedTrace, OperatorGroup, Ruleset, TAG_SYNC};
use crate::trace_model::{build_event_trees, total_energy_joules, EventKind, EventTree, Trace, TraceError, TraceMeta};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributionView {
    #[serde(rename = "cpu")]
    CpuOnly,
    #[serde(rename = "gpu")]
    GpuOnly,
    Combined,
}

impl AttributionView {
    pub fn as_str(self) -> &'static str {
        match self {
            AttributionView::CpuOnly => "cpu",
            AttributionView::GpuOnly => "gpu",
            AttributionView::Combined => "combined",
        }
    }
}

impl fmt::Display for AttributionView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttributionView {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cpu" | "cpu-only" | "cpuonly" => Ok(AttributionView::CpuOnly),
            "gpu" | "gpu-only" | "gpuonly" => Ok(AttributionView::GpuOnly),
            "combined" | "both" => Ok(AttributionView::Combined),
            other => Err(format!("unknown view '{other}' (expected cpu, gpu or combined)")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub latency_us: u64,
    pub percent: f64,
    pub op_count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopOp {
    pub name: String,
    pub group: OperatorGroup,
    pub latency_us: u64,
    pub percent: f64,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub ttft_us: u64,
    /// Mean gap between consecutive decode-token markers.
    pub tpot_us: Option<f64>,
    pub decode_throughput_tok_per_s: Option<f64>,
    pub e2e_throughput_tok_per_s: Option<f64>,
    pub n_decode_tokens: u64,
    pub energy_j: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreakdownReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub view: AttributionView,
    pub total_us: u64,
    /// Span from the first to the last timed event.
    pub wall_us: u64,
    pub per_group: BTreeMap<OperatorGroup, GroupStat>,
    pub top_nongemm: Vec<TopOp>,
    /// Latency of synchronization waits (kept in Uncategorized).
    pub sync_wait_us: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_metrics: Option<PhaseMetrics>,
    #[serde(default)]
    pub meta: TraceMeta,
}

impl BreakdownReport {
    pub fn latency(&self, group: OperatorGroup) -> u64 {
        self.per_group.get(&group).map_or(0, |s| s.latency_us)
    }

    pub fn percent(&self, group: OperatorGroup) -> f64 {
        self.per_group.get(&group).map_or(0.0, |s| s.percent)
    }

    pub fn count(&self, group: OperatorGroup) -> u64 {
        self.per_group.get(&group).map_or(0, |s| s.op_count)
    }

    pub fn gemm_us(&self) -> u64 {
        self.latency(OperatorGroup::Gemm)
    }

    pub fn nongemm_us(&self) -> u64 {
        self.total_us - self.gemm_us()
    }

    pub fn nongemm_count(&self) -> u64 {
        self.per_group.iter().filter(|(g, _)| g.is_non_gemm()).map(|(_, s)| s.op_count).sum()
    }

    pub fn nongemm_percent(&self) -> f64 {
        percent_of(self.nongemm_us(), self.total_us)
    }

    pub fn exceeds_wall_clock(&self) -> bool {
        self.total_us > self.wall_us
    }
}

#[derive(Debug, Error)]
pub enum BreakdownError {
    #[error("cannot compare a {a} breakdown with a {b} breakdown")]
    ViewMismatch { a: AttributionView, b: AttributionView },
    #[error("no phase markers matched (prefill /{prefill}/, decode /{decode}/)")]
    MissingPhaseMarkers { prefill: String, decode: String },
    #[error("top-k must be at least 1")]
    ZeroTopK,
    #[error("no comparisons to average")]
    EmptyStudy,
    #[error(transparent)]
    Trace(#[from] TraceError),
}

pub(crate) fn percent_of(part: u64, total: u64) -> f64 {
    if total == 0 {
        0.0
    } else {
        part as f64 * 100.0 / total as f64
    }
}

/// Classified trace plus its event tree, shared by all analyses.
pub struct Analysis<'a> {
    pub trace: &'a Trace,
    pub tree: EventTree,
    pub classes: ClassifiedTrace,
    pub ruleset: &'a Ruleset,
}

impl<'a> Analysis<'a> {
    pub fn new(trace: &'a Trace, ruleset: &'a Ruleset) -> Result<Self, TraceError> {
        let tree = build_event_trees(trace)?;
        let classes = classify_trace(ruleset, trace, &tree);
        Ok(Self { trace, tree, classes, ruleset })
    }

    fn is_sync(&self, i: usize) -> bool {
        self.classes.rules[i].is_some_and(|r| self.ruleset.rule(r).has_tag(TAG_SYNC))
    }

    /// Non-GEMM event instances counted for `view`, for diffing.
    pub fn nongemm_instances(&self, view: AttributionView) -> BTreeMap<String, u64> {
        let mut counts = BTreeMap::new();
        for (i, ev) in self.trace.events.iter().enumerate() {
            if self.counts_in_view(i, view) && self.classes.groups[i].is_non_gemm() {
                *counts.entry(ev.name.clone()).or_default() += 1;
            }
        }
        counts
    }

    fn counts_in_view(&self, i: usize, view: AttributionView) -> bool {
        match (self.trace.events[i].kind, view) {
            (EventKind::CpuOp, AttributionView::CpuOnly | AttributionView::Combined) => true,
            (EventKind::GpuKernel, AttributionView::GpuOnly) => true,
            (EventKind::GpuKernel, AttributionView::Combined) => self.tree.kernel_owner(self.trace.events[i].id).is_none(),
            _ => false,
        }
    }

    /// Nearest launcher or launcher ancestor sharing the kernel's group.
    fn issuing_op(&self, i: usize) -> Option<&'a str> {
        let group = self.classes.groups[i];
        if let Some(j) = self.classes.inherited_from[i] {
            return Some(self.trace.events[j].name.as_str());
        }
        let owner = self.tree.kernel_owner(self.trace.events[i].id)?;
        let first = self.tree.node(owner)?;
        std::iter::once(first)
            .chain(self.tree.ancestors(owner))
            .find(|n| self.classes.groups[n.event_index] == group)
            .map(|n| self.trace.events[n.event_index].name.as_str())
    }

    pub fn breakdown(&self, view: AttributionView, k: usize) -> Result<BreakdownReport, BreakdownError> {
        if k == 0 {
            return Err(BreakdownError::ZeroTopK);
        }
        let events = &self.trace.events;
        let mut per_group: BTreeMap<OperatorGroup, GroupStat> = BTreeMap::new();
        let mut by_name: HashMap<(&str, OperatorGroup), (u64, u64)> = HashMap::new();
        let mut sync_wait_us = 0;

        for (i, ev) in events.iter().enumerate() {
            let group = self.classes.groups[i];
            let latency = match ev.kind {
                EventKind::CpuOp if view != AttributionView::GpuOnly => {
                    self.tree.self_time(ev.id).expect("cpu op in tree")
                }
                EventKind::GpuKernel if view != AttributionView::CpuOnly => ev.duration_us,
                _ => continue,
            };
            let stat = per_group.entry(group).or_default();
            stat.latency_us += latency;
            let counted = self.counts_in_view(i, view);
            if counted {
                stat.op_count += 1;
            }
            if self.is_sync(i) {
                sync_wait_us += latency;
                continue;
            }
            if group.is_non_gemm() {
                // Inherited kernels are reported under their launcher's name;
                // in the combined view so is every launched kernel, so its time
                // joins the operator that issued it.
                let name = match (ev.kind, self.classes.inherited_from[i]) {
                    (EventKind::GpuKernel, _) if view == AttributionView::Combined => self.issuing_op(i).unwrap_or(&ev.name),
                    (EventKind::GpuKernel, Some(j)) => events[j].name.as_str(),
                    _ => ev.name.as_str(),
                };
                let slot = by_name.entry((name, group)).or_default();
                slot.0 += latency;
                if counted {
                    slot.1 += 1;
                }
            }
        }

        let total_us: u64 = per_group.values().map(|s| s.latency_us).sum();
        for stat in per_group.values_mut() {
            stat.percent = percent_of(stat.latency_us, total_us);
        }
        let mut top: Vec<TopOp> = by_name
            .into_iter()
            .filter(|(_, (lat, _))| *lat > 0)
            .map(|((name, group), (latency_us, count))| TopOp {
                name: name.to_string(),
                group,
                latency_us,
                percent: percent_of(latency_us, total_us),
                count,
            })
            .collect();
        top.sort_by(|a, b| {
            b.latency_us
                .cmp(&a.latency_us)
                .then(b.count.cmp(&a.count))
                .then_with(|| a.name.cmp(&b.name))
                .then(a.group.cmp(&b.group))
        });
        top.truncate(k);

        let timed = events.iter().filter(|e| matches!(e.kind, EventKind::CpuOp | EventKind::GpuKernel));
        let (lo, hi) = timed.fold((u64::MAX, 0), |(lo, hi), e| (lo.min(e.start_us), hi.max(e.end_us())));
        Ok(BreakdownReport {
            label: None,
            view,
            total_us,
            wall_us: hi.saturating_sub(lo),
            per_group,
            top_nongemm: top,
            sync_wait_us,
            phase_metrics: None,
            meta: self.trace.meta.clone(),
        })
    }
}

pub fn compute_breakdown(
    trace: &Trace,
    ruleset: &Ruleset,
    view: AttributionView,
    k: usize,
) -> Result<BreakdownReport, BreakdownError> {
    Analysis::new(trace, ruleset)?.breakdown(view, k)
}

/// Marker-name patterns identifying the prefill span and decode tokens.
#[derive(Clone, Debug)]
pub struct PhaseRules {
    pub prefill: Regex,
    pub decode: Regex,
}

impl Default for PhaseRules {
    fn default() -> Self {
        Self {
            prefill: Regex::new(r"(?i)^(prefill|prompt)").unwrap(),
            decode: Regex::new(r"(?i)^(decode|token|generate_token)").unwrap(),
        }
    }
}

/// TTFT is the end of the prefill marker (or the first decode marker when
/// there is no prefill marker) relative to the trace origin. TPOT needs at
/// least two decode markers.
pub fn compute_phase_metrics(trace: &Trace, rules: &PhaseRules) -> Result<PhaseMetrics, BreakdownError> {
    let markers = || trace.events.iter().filter(|e| e.kind == EventKind::Marker);
    let origin = trace.origin_us();
    let prefill_end = markers().filter(|e| rules.prefill.is_match(&e.name)).map(|e| e.end_us()).max();
    let mut decode: Vec<_> = markers().filter(|e| rules.decode.is_match(&e.name)).collect();
    decode.sort_by_key(|e| (e.start_us, e.id));

    let first_token_at = match (prefill_end, decode.first()) {
        (Some(end), _) => end,
        (None, Some(first)) => first.start_us,
        (None, None) => {
            return Err(BreakdownError::MissingPhaseMarkers {
                prefill: rules.prefill.as_str().to_string(),
                decode: rules.decode.as_str().to_string(),
            })
        }
    };
    let n = decode.len() as u64;
    let tpot_us = (n >= 2).then(|| (decode[decode.len() - 1].start_us - decode[0].start_us) as f64 / (n - 1) as f64);
    let e2e = decode.iter().map(|e| e.end_us()).max().map(|last| last - origin);
    Ok(PhaseMetrics {
        ttft_us: first_token_at - origin,
        tpot_us,
        decode_throughput_tok_per_s: tpot_us.filter(|t| *t > 0.0).map(|t| 1e6 / t),
        e2e_throughput_tok_per_s: e2e.filter(|d| *d > 0 && n > 0).map(|d| n as f64 * 1e6 / d as f64),
        n_decode_tokens: n,
        energy_j: total_energy_joules(trace),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupDelta {
    pub group: OperatorGroup,
    pub latency_a_us: u64,
    pub latency_b_us: u64,
    /// a / b; `None` when b has no latency in this group.
    pub ratio: Option<f64>,
    pub percent_a: f64,
    pub percent_b: f64,
    /// percent_b − percent_a in percentage points.
    pub delta_pp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreakdownComparison {
    pub view: AttributionView,
    pub groups: Vec<GroupDelta>,
    pub nongemm_percent_a: f64,
    pub nongemm_percent_b: f64,
    pub nongemm_delta_pp: f64,
    /// total_a / total_b.
    pub total_speedup: Option<f64>,
}

pub fn compare_breakdowns(a: &BreakdownReport, b: &BreakdownReport) -> Result<BreakdownComparison, BreakdownError> {
    if a.view != b.view {
        return Err(BreakdownError::ViewMismatch { a: a.view, b: b.view });
    }
    let groups = OperatorGroup::ALL
        .iter()
        .filter(|g| a.per_group.contains_key(g) || b.per_group.contains_key(g))
        .map(|&g| {
            let (la, lb) = (a.latency(g), b.latency(g));
            GroupDelta {
                group: g,
                latency_a_us: la,
                latency_b_us: lb,
                ratio: (lb > 0).then(|| la as f64 / lb as f64),
                percent_a: a.percent(g),
                percent_b: b.percent(g),
                delta_pp: b.percent(g) - a.percent(g),
            }
        })
        .collect();
    Ok(BreakdownComparison {
        view: a.view,
        groups,
        nongemm_percent_a: a.nongemm_percent(),
        nongemm_percent_b: b.nongemm_percent(),
        nongemm_delta_pp: b.nongemm_percent() - a.nongemm_percent(),
        total_speedup: (b.total_us > 0).then(|| a.total_us as f64 / b.total_us as f64),
    })
}

/// Arithmetic mean over comparison pairs, each pair weighted equally.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonMean {
    pub pairs: usize,
    pub nongemm_percent_a: f64,
    pub nongemm_percent_b: f64,
    pub nongemm_delta_pp: f64,
}

pub fn mean_comparison(pairs: &[BreakdownComparison]) -> Result<ComparisonMean, BreakdownError> {
    if pairs.is_empty() {
        return Err(BreakdownError::EmptyStudy);
    }
    let n = pairs.len() as f64;
    let mean = |f: fn(&BreakdownComparison) -> f64| pairs.iter().map(f).sum::<f64>() / n;
    Ok(ComparisonMean {
        pairs: pairs.len(),
        nongemm_percent_a: mean(|c| c.nongemm_percent_a),
        nongemm_percent_b: mean(|c| c.nongemm_percent_b),
        nongemm_delta_pp: mean(|c| c.nongemm_delta_pp),
    })
}
