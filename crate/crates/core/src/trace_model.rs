//! Normalized in-memory trace representation shared by every analysis.
//!
//! All timestamps are integer microseconds relative to the trace origin, so
//! self-time accounting is exact. A [`Trace`] is immutable once validated and
//! [`EventTree`] is derived from it without copying events.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type EventId = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    #[serde(rename = "cpu")]
    CpuOp,
    #[serde(rename = "gpu")]
    GpuKernel,
    Marker,
    #[serde(rename = "counter")]
    CounterSample,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::CpuOp => "cpu",
            EventKind::GpuKernel => "gpu",
            EventKind::Marker => "marker",
            EventKind::CounterSample => "counter",
        }
    }
}

/// Timeline lane: (process id, thread or stream id).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Track {
    pub pid: u64,
    pub tid: u64,
}

impl Track {
    pub fn new(pid: u64, tid: u64) -> Self {
        Self { pid, tid }
    }
}

impl fmt::Display for Track {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.pid, self.tid)
    }
}

/// One timed operator or kernel occurrence.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorEvent {
    pub id: EventId,
    pub name: String,
    pub kind: EventKind,
    pub start_us: u64,
    pub duration_us: u64,
    pub track: Track,
    /// Enclosing CpuOp on the same track.
    pub parent_id: Option<EventId>,
    /// Links a CpuOp launch to the GpuKernel(s) it issued.
    pub correlation_id: Option<u64>,
    pub tensor_shapes: Option<Vec<Vec<i64>>>,
    pub attrs: BTreeMap<String, String>,
}

impl OperatorEvent {
    pub fn new(id: EventId, name: impl Into<String>, kind: EventKind, start_us: u64, duration_us: u64) -> Self {
        Self {
            id,
            name: name.into(),
            kind,
            start_us,
            duration_us,
            track: Track::default(),
            parent_id: None,
            correlation_id: None,
            tensor_shapes: None,
            attrs: BTreeMap::new(),
        }
    }

    pub fn on_track(mut self, pid: u64, tid: u64) -> Self {
        self.track = Track::new(pid, tid);
        self
    }

    pub fn with_parent(mut self, parent: EventId) -> Self {
        self.parent_id = Some(parent);
        self
    }

    pub fn with_correlation(mut self, corr: u64) -> Self {
        self.correlation_id = Some(corr);
        self
    }

    pub fn with_attr(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.attrs.insert(key.into(), value.into());
        self
    }

    pub fn end_us(&self) -> u64 {
        self.start_us + self.duration_us
    }

    fn contains(&self, other: &OperatorEvent) -> bool {
        self.start_us <= other.start_us && other.end_us() <= self.end_us()
    }
}

/// Descriptive trace metadata. Every field is optional.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub platform: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<u64>,
}

impl TraceMeta {
    /// Fills fields that are unset in `self` from `other`.
    pub fn merge_missing(&mut self, other: &TraceMeta) {
        macro_rules! fill {
            ($($f:ident),*) => { $( if self.$f.is_none() { self.$f = other.$f.clone(); } )* };
        }
        fill!(model, platform, flow, precision, batch_size, seq_len);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergySample {
    pub ts_us: u64,
    pub watts: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub meta: TraceMeta,
    pub events: Vec<OperatorEvent>,
    pub energy_samples: Vec<EnergySample>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("duplicate event id {0}")]
    DuplicateId(EventId),
    #[error("event {child} has parent {parent} which does not exist")]
    DanglingParentId { child: EventId, parent: EventId },
    #[error("event {child} escapes parent {parent} (interval or track not contained)")]
    ChildEscapesParent { child: EventId, parent: EventId },
    #[error("events escape their parents: {}", format_ids(.0))]
    ChildrenEscapeParents(Vec<(EventId, EventId)>),
    #[error("sibling events {0} and {1} overlap on track {2}")]
    OverlappingSiblings(EventId, EventId, Track),
    #[error("kernel {kernel} correlation {correlation} matches {matches} cpu ops (expected 1)")]
    BadCorrelation { kernel: EventId, correlation: u64, matches: usize },
    #[error("energy samples must be sorted by timestamp with non-negative power")]
    BadEnergySamples,
}

fn format_ids(pairs: &[(EventId, EventId)]) -> String {
    pairs
        .iter()
        .map(|(c, p)| format!("{c} in {p}"))
        .collect::<Vec<_>>()
        .join(", ")
}

impl Trace {
    pub fn new(events: Vec<OperatorEvent>) -> Self {
        Self { events, ..Default::default() }
    }

    /// Checks the structural invariants every analysis relies on.
    pub fn validate(&self) -> Result<(), TraceError> {
        let index = self.index_by_id()?;
        let mut escapes = Vec::new();
        for ev in &self.events {
            if let Some(pid) = ev.parent_id {
                let parent = index
                    .get(&pid)
                    .map(|&i| &self.events[i])
                    .ok_or(TraceError::DanglingParentId { child: ev.id, parent: pid })?;
                if parent.track != ev.track || !parent.contains(ev) {
                    escapes.push((ev.id, pid));
                }
            }
        }
        if escapes.len() == 1 {
            let (child, parent) = escapes[0];
            return Err(TraceError::ChildEscapesParent { child, parent });
        } else if !escapes.is_empty() {
            return Err(TraceError::ChildrenEscapeParents(escapes));
        }

        let mut cpu_by_corr: HashMap<u64, usize> = HashMap::new();
        for ev in self.events.iter().filter(|e| e.kind == EventKind::CpuOp) {
            if let Some(c) = ev.correlation_id {
                *cpu_by_corr.entry(c).or_default() += 1;
            }
        }
        for ev in self.events.iter().filter(|e| e.kind == EventKind::GpuKernel) {
            if let Some(c) = ev.correlation_id {
                let matches = cpu_by_corr.get(&c).copied().unwrap_or(0);
                if matches != 1 {
                    return Err(TraceError::BadCorrelation { kernel: ev.id, correlation: c, matches });
                }
            }
        }

        let sorted = self.energy_samples.windows(2).all(|w| w[0].ts_us <= w[1].ts_us);
        let nonneg = self.energy_samples.iter().all(|s| s.watts >= 0.0 && s.watts.is_finite());
        if !sorted || !nonneg {
            return Err(TraceError::BadEnergySamples);
        }
        Ok(())
    }

    fn index_by_id(&self) -> Result<HashMap<EventId, usize>, TraceError> {
        let mut index = HashMap::with_capacity(self.events.len());
        for (i, ev) in self.events.iter().enumerate() {
            if index.insert(ev.id, i).is_some() {
                return Err(TraceError::DuplicateId(ev.id));
            }
        }
        Ok(index)
    }

    /// Earliest start over all events, or 0 for an empty trace.
    pub fn origin_us(&self) -> u64 {
        self.events.iter().map(|e| e.start_us).min().unwrap_or(0)
    }
}

/// Reconstructs `parent_id` links for CpuOps from interval containment on
/// each track. Existing links are discarded. Partial overlaps are reported
/// as [`TraceError::ChildEscapesParent`].
pub fn assign_parents_by_containment(events: &mut [OperatorEvent]) -> Result<(), TraceError> {
    let mut by_track: BTreeMap<Track, Vec<usize>> = BTreeMap::new();
    for (i, ev) in events.iter().enumerate() {
        if ev.kind == EventKind::CpuOp {
            by_track.entry(ev.track).or_default().push(i);
        }
    }
    let mut links = Vec::new();
    for idxs in by_track.values_mut() {
        // Outer events first: start ascending, longer first, then id.
        idxs.sort_by(|&a, &b| {
            let (ea, eb) = (&events[a], &events[b]);
            (ea.start_us, std::cmp::Reverse(ea.duration_us), ea.id).cmp(&(
                eb.start_us,
                std::cmp::Reverse(eb.duration_us),
                eb.id,
            ))
        });
        let mut stack: Vec<usize> = Vec::new();
        for &i in idxs.iter() {
            let ev = &events[i];
            while let Some(&top) = stack.last() {
                let t = &events[top];
                if ev.start_us < t.end_us() || ev.start_us == t.start_us {
                    break;
                }
                stack.pop();
            }
            let parent = stack.last().copied();
            if let Some(p) = parent {
                if ev.end_us() > events[p].end_us() {
                    return Err(TraceError::ChildEscapesParent { child: ev.id, parent: events[p].id });
                }
            }
            links.push((i, parent));
            stack.push(i);
        }
    }
    for (i, parent) in links {
        let pid = parent.map(|p| events[p].id);
        events[i].parent_id = pid;
    }
    Ok(())
}

/// Per-track forests of CpuOps with self-times, plus kernel ownership.
#[derive(Clone, Debug)]
pub struct EventTree {
    nodes: Vec<TreeNode>,
    node_of_event: HashMap<EventId, usize>,
    roots: BTreeMap<Track, Vec<usize>>,
    kernel_owner: BTreeMap<EventId, Option<EventId>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeNode {
    /// Index of the event in `Trace::events`.
    pub event_index: usize,
    pub event_id: EventId,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub self_time_us: u64,
}

impl EventTree {
    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn roots(&self) -> impl Iterator<Item = (&Track, &[usize])> {
        self.roots.iter().map(|(t, r)| (t, r.as_slice()))
    }

    pub fn node(&self, id: EventId) -> Option<&TreeNode> {
        self.node_of_event.get(&id).map(|&i| &self.nodes[i])
    }

    pub fn self_time(&self, id: EventId) -> Option<u64> {
        self.node(id).map(|n| n.self_time_us)
    }

    /// Launching CpuOp for a kernel, if the kernel is correlated.
    pub fn kernel_owner(&self, kernel: EventId) -> Option<EventId> {
        self.kernel_owner.get(&kernel).copied().flatten()
    }

    /// All GpuKernels of the trace in id order with their launching CpuOp.
    pub fn kernels(&self) -> impl Iterator<Item = (EventId, Option<EventId>)> + '_ {
        self.kernel_owner.iter().map(|(&k, &o)| (k, o))
    }

    pub fn ancestors(&self, id: EventId) -> impl Iterator<Item = &TreeNode> + '_ {
        let mut cur = self.node(id).and_then(|n| n.parent);
        std::iter::from_fn(move || {
            let n = &self.nodes[cur?];
            cur = n.parent;
            Some(n)
        })
    }
}

/// Builds the CpuOp forests from explicit `parent_id` links and computes
/// self-time. Node order is by event id, so the result does not depend on
/// input ordering.
pub fn build_event_trees(trace: &Trace) -> Result<EventTree, TraceError> {
    trace.validate()?;
    let events = &trace.events;

    let mut cpu: Vec<usize> = (0..events.len()).filter(|&i| events[i].kind == EventKind::CpuOp).collect();
    cpu.sort_by_key(|&i| events[i].id);
    let node_of_event: HashMap<EventId, usize> =
        cpu.iter().enumerate().map(|(n, &i)| (events[i].id, n)).collect();

    let mut nodes: Vec<TreeNode> = cpu
        .iter()
        .map(|&i| TreeNode {
            event_index: i,
            event_id: events[i].id,
            parent: None,
            children: Vec::new(),
            self_time_us: 0,
        })
        .collect();

    let mut escapes = Vec::new();
    for n in 0..nodes.len() {
        let ev = &events[nodes[n].event_index];
        if let Some(pid) = ev.parent_id {
            match node_of_event.get(&pid) {
                Some(&p) => {
                    nodes[n].parent = Some(p);
                    nodes[p].children.push(n);
                }
                // Parent exists (validated) but is not a CpuOp.
                None => escapes.push((ev.id, pid)),
            }
        }
    }
    if escapes.len() == 1 {
        let (child, parent) = escapes[0];
        return Err(TraceError::ChildEscapesParent { child, parent });
    } else if !escapes.is_empty() {
        return Err(TraceError::ChildrenEscapeParents(escapes));
    }

    let mut roots: BTreeMap<Track, Vec<usize>> = BTreeMap::new();
    for (n, node) in nodes.iter().enumerate() {
        if node.parent.is_none() {
            roots.entry(events[node.event_index].track).or_default().push(n);
        }
    }

    let by_start = |a: &usize, b: &usize, nodes: &[TreeNode]| {
        let (ea, eb) = (&events[nodes[*a].event_index], &events[nodes[*b].event_index]);
        (ea.start_us, ea.end_us(), ea.id).cmp(&(eb.start_us, eb.end_us(), eb.id))
    };
    let check_siblings = |sibs: &[usize], nodes: &[TreeNode]| -> Result<(), TraceError> {
        for w in sibs.windows(2) {
            let (a, b) = (&events[nodes[w[0]].event_index], &events[nodes[w[1]].event_index]);
            if b.start_us < a.end_us() && a.start_us < b.end_us() {
                return Err(TraceError::OverlappingSiblings(a.id, b.id, a.track));
            }
        }
        Ok(())
    };

    for r in roots.values_mut() {
        let mut sorted = std::mem::take(r);
        sorted.sort_by(|a, b| by_start(a, b, &nodes));
        check_siblings(&sorted, &nodes)?;
        *r = sorted;
    }
    for n in 0..nodes.len() {
        let mut kids = std::mem::take(&mut nodes[n].children);
        kids.sort_by(|a, b| by_start(a, b, &nodes));
        check_siblings(&kids, &nodes)?;
        let child_sum: u64 = kids.iter().map(|&c| events[nodes[c].event_index].duration_us).sum();
        let dur = events[nodes[n].event_index].duration_us;
        // Containment plus disjoint siblings guarantees child_sum <= dur.
        nodes[n].self_time_us = dur - child_sum;
        nodes[n].children = kids;
    }

    let mut cpu_by_corr: HashMap<u64, EventId> = HashMap::new();
    for &i in &cpu {
        if let Some(c) = events[i].correlation_id {
            cpu_by_corr.insert(c, events[i].id);
        }
    }
    let kernel_owner = events
        .iter()
        .filter(|e| e.kind == EventKind::GpuKernel)
        .map(|e| (e.id, e.correlation_id.and_then(|c| cpu_by_corr.get(&c).copied())))
        .collect();

    Ok(EventTree { nodes, node_of_event, roots, kernel_owner })
}

/// Trapezoidal integral of sampled power, in joules. `None` with fewer than
/// two samples.
pub fn total_energy_joules(trace: &Trace) -> Option<f64> {
    if trace.energy_samples.len() < 2 {
        return None;
    }
    let joules = trace
        .energy_samples
        .windows(2)
        .map(|w| {
            let dt_s = w[1].ts_us.saturating_sub(w[0].ts_us) as f64 * 1e-6;
            0.5 * (w[0].watts + w[1].watts) * dt_s
        })
        .sum::<f64>();
    Some(joules.max(0.0))
}
