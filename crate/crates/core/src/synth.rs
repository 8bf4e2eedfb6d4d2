//! Deterministic synthetic traces with exactly known group totals.
//!
//! A [`SynthSpec`] fixes, per operator group, the summed self-time and the
//! number of CpuOps (and, separately, of GPU kernels). Durations are split
//! with largest-remainder allocation so every group sums to its target in
//! integer microseconds. The seed only changes event order, nesting shape
//! and timestamps, never an aggregate.
//!
//! An optional variant plan derives a counterpart trace (fused or
//! quantized) by removing or adding operator instances and replacing group
//! latencies.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{OperatorGroup, Ruleset};
use crate::trace_model::{EnergySample, EventKind, OperatorEvent, Trace, TraceMeta, Track};

/// Kernel name that matches no builtin rule, so it takes its launcher's group.
pub const INHERITING_KERNEL: &str = "void at::native::vectorized_elementwise_kernel<4>";
/// Kernel name for uncategorized device work. Never correlated.
pub const OPAQUE_KERNEL: &str = "opaque_device_kernel";

const CPU_TRACK: Track = Track { pid: 1, tid: 1 };
const GPU_TRACK: Track = Track { pid: 0, tid: 7 };
const MARKER_TRACK: Track = Track { pid: 1, tid: 0 };

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupTarget {
    pub total_us: u64,
    pub count: u64,
    /// Name pool; defaults to the group's builtin exemplars.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub names: Option<Vec<String>>,
}

impl GroupTarget {
    pub fn new(total_us: u64, count: u64) -> Self {
        Self { total_us, count, names: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub prefill_us: u64,
    pub decode_tokens: u64,
    pub decode_gap_us: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyPlan {
    pub watts: f64,
    pub interval_us: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariantPlan {
    /// Instances removed per op name.
    pub absorb: BTreeMap<String, u64>,
    /// Instances removed per group, taken from the last pool names first.
    pub absorb_groups: BTreeMap<OperatorGroup, u64>,
    /// Instances added per op name; the group comes from the builtin rules.
    pub add: BTreeMap<String, u64>,
    /// Exact CPU latency per group in the counterpart.
    pub latency_us: BTreeMap<OperatorGroup, u64>,
    /// Multiplier on the baseline group latency, rounded to the nearest µs.
    pub latency_scale: BTreeMap<OperatorGroup, f64>,
    /// Replaces the kernel targets in the counterpart.
    pub gpu_groups: Option<BTreeMap<OperatorGroup, GroupTarget>>,
    pub meta: Option<TraceMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub meta: TraceMeta,
    #[serde(default)]
    pub groups: BTreeMap<OperatorGroup, GroupTarget>,
    #[serde(default)]
    pub gpu_groups: BTreeMap<OperatorGroup, GroupTarget>,
    #[serde(default = "default_depth")]
    pub nesting_depth: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phases: Option<PhasePlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy: Option<EnergyPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<VariantPlan>,
}

fn default_depth() -> u32 {
    1
}

impl SynthSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            meta: TraceMeta::default(),
            groups: BTreeMap::new(),
            gpu_groups: BTreeMap::new(),
            nesting_depth: 1,
            phases: None,
            energy: None,
            variant: None,
        }
    }

    pub fn group(mut self, g: OperatorGroup, total_us: u64, count: u64) -> Self {
        self.groups.insert(g, GroupTarget::new(total_us, count));
        self
    }

    pub fn gpu_group(mut self, g: OperatorGroup, total_us: u64, count: u64) -> Self {
        self.gpu_groups.insert(g, GroupTarget::new(total_us, count));
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("infeasible spec: {0}")]
    InfeasibleSpec(String),
}

fn infeasible(msg: impl Into<String>) -> SynthError {
    SynthError::InfeasibleSpec(msg.into())
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub trace: Trace,
    pub counterpart: Option<Trace>,
}

/// Per-group op-name multiset plus latency target.
#[derive(Clone, Debug)]
struct Bucket {
    names: Vec<(String, u64)>,
    total_us: u64,
}

impl Bucket {
    fn count(&self) -> u64 {
        self.names.iter().map(|(_, c)| c).sum()
    }
}

struct Plan {
    meta: TraceMeta,
    cpu: BTreeMap<OperatorGroup, Bucket>,
    gpu: BTreeMap<OperatorGroup, Bucket>,
}

/// Splits `count` instances round-robin over `pool`.
fn spread(pool: &[String], count: u64) -> Vec<(String, u64)> {
    let n = pool.len() as u64;
    pool.iter()
        .enumerate()
        .map(|(i, name)| (name.clone(), count / n + u64::from((i as u64) < count % n)))
        .filter(|(_, c)| *c > 0)
        .collect()
}

fn bucket(rules: &Ruleset, g: OperatorGroup, t: &GroupTarget, kernel: bool) -> Result<Bucket, SynthError> {
    if t.count == 0 && t.total_us > 0 {
        return Err(infeasible(format!("{g}: {} µs over zero ops", t.total_us)));
    }
    let pool: Vec<String> = match &t.names {
        Some(names) if names.is_empty() => return Err(infeasible(format!("{g}: empty name pool"))),
        Some(names) => names.clone(),
        None if kernel && g == OperatorGroup::Uncategorized => vec![OPAQUE_KERNEL.to_string()],
        None if kernel && g.kernel_exemplars().is_empty() => vec![INHERITING_KERNEL.to_string()],
        None if kernel => g.kernel_exemplars().iter().map(|s| s.to_string()).collect(),
        None => g.exemplars().iter().map(|s| s.to_string()).collect(),
    };
    for name in &pool {
        let got = rules.classify_name(name);
        let inherits = kernel && name == INHERITING_KERNEL && g != OperatorGroup::Uncategorized;
        if got != g && !inherits {
            return Err(infeasible(format!("name '{name}' classifies as {got}, not {g}")));
        }
    }
    Ok(Bucket { names: spread(&pool, t.count), total_us: t.total_us })
}

fn base_plan(spec: &SynthSpec, rules: &Ruleset) -> Result<Plan, SynthError> {
    let cpu = spec.groups.iter().map(|(g, t)| Ok((*g, bucket(rules, *g, t, false)?))).collect::<Result<_, SynthError>>()?;
    let gpu = spec.gpu_groups.iter().map(|(g, t)| Ok((*g, bucket(rules, *g, t, true)?))).collect::<Result<_, SynthError>>()?;
    Ok(Plan { meta: spec.meta.clone(), cpu, gpu })
}

fn variant_plan(base: &Plan, v: &VariantPlan, rules: &Ruleset) -> Result<Plan, SynthError> {
    let mut cpu = base.cpu.clone();
    for (name, n) in &v.absorb {
        let slot = cpu
            .values_mut()
            .flat_map(|b| b.names.iter_mut())
            .find(|(x, _)| x == name)
            .ok_or_else(|| infeasible(format!("cannot absorb '{name}': not generated")))?;
        if slot.1 < *n {
            return Err(infeasible(format!("cannot absorb {n} of '{name}': only {}", slot.1)));
        }
        slot.1 -= n;
    }
    for (g, n) in &v.absorb_groups {
        let b = cpu.get_mut(g).ok_or_else(|| infeasible(format!("cannot absorb from absent group {g}")))?;
        if b.count() < *n {
            return Err(infeasible(format!("cannot absorb {n} ops of {g}: only {}", b.count())));
        }
        let mut left = *n;
        for slot in b.names.iter_mut().rev() {
            let take = left.min(slot.1);
            slot.1 -= take;
            left -= take;
        }
    }
    for (name, n) in &v.add {
        let g = rules.classify_name(name);
        let b = cpu.entry(g).or_insert_with(|| Bucket { names: Vec::new(), total_us: 0 });
        match b.names.iter_mut().find(|(x, _)| x == name) {
            Some(slot) => slot.1 += n,
            None => b.names.push((name.clone(), *n)),
        }
    }
    for (g, b) in cpu.iter_mut() {
        if let Some(&us) = v.latency_us.get(g) {
            b.total_us = us;
        } else if let Some(&s) = v.latency_scale.get(g) {
            if !(s.is_finite() && s >= 0.0) {
                return Err(infeasible(format!("{g}: bad latency scale {s}")));
            }
            b.total_us = (b.total_us as f64 * s).round() as u64;
        }
        b.names.retain(|(_, c)| *c > 0);
        if b.count() == 0 && b.total_us > 0 {
            return Err(infeasible(format!("{g}: {} µs left over zero ops", b.total_us)));
        }
    }
    for g in v.latency_us.keys().chain(v.latency_scale.keys()) {
        if !cpu.contains_key(g) {
            return Err(infeasible(format!("latency given for group {g} with no ops")));
        }
    }
    let gpu = match &v.gpu_groups {
        Some(groups) => groups.iter().map(|(g, t)| Ok((*g, bucket(rules, *g, t, true)?))).collect::<Result<_, SynthError>>()?,
        None => base.gpu.clone(),
    };
    Ok(Plan { meta: v.meta.clone().unwrap_or_else(|| base.meta.clone()), cpu, gpu })
}

/// Splits `total` into `weights.len()` integers proportional to the weights
/// that sum exactly to `total`. Remainders go to the largest fractional
/// parts, ties to the lower index.
pub fn largest_remainder(total: u64, weights: &[u64]) -> Vec<u64> {
    let w_sum: u128 = weights.iter().map(|&w| w as u128).sum();
    if weights.is_empty() {
        return Vec::new();
    }
    if w_sum == 0 {
        return largest_remainder(total, &vec![1; weights.len()]);
    }
    let mut out: Vec<u64> = Vec::with_capacity(weights.len());
    let mut rems: Vec<(u128, usize)> = Vec::with_capacity(weights.len());
    for (i, &w) in weights.iter().enumerate() {
        let num = total as u128 * w as u128;
        out.push((num / w_sum) as u64);
        rems.push((num % w_sum, i));
    }
    let mut left = total - out.iter().sum::<u64>();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, i) in rems {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

struct Op {
    name: String,
    group: OperatorGroup,
    self_us: u64,
    children: Vec<usize>,
    parent: Option<usize>,
    pre_us: u64,
    dur_us: u64,
    start_us: u64,
}

fn expand(bucket: &Bucket, rng: &mut ChaCha8Rng) -> Vec<(String, u64)> {
    let names: Vec<&str> = bucket.names.iter().flat_map(|(n, c)| std::iter::repeat_n(n.as_str(), *c as usize)).collect();
    let weights: Vec<u64> = names.iter().map(|_| rng.gen_range(1..=16)).collect();
    let durs = largest_remainder(bucket.total_us, &weights);
    names.into_iter().map(str::to_string).zip(durs).collect()
}

fn realize(plan: &Plan, spec: &SynthSpec, seed: u64) -> Trace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ops: Vec<Op> = Vec::new();
    for (g, b) in &plan.cpu {
        for (name, self_us) in expand(b, &mut rng) {
            ops.push(Op { name, group: *g, self_us, children: Vec::new(), parent: None, pre_us: 0, dur_us: 0, start_us: 0 });
        }
    }
    ops.shuffle(&mut rng);

    // Pre-order construction keeps a stack of open ancestors.
    let depth = spec.nesting_depth.max(1) as usize;
    let mut stack: Vec<usize> = Vec::new();
    let mut roots = Vec::new();
    for i in 0..ops.len() {
        let min_pop = usize::from(stack.len() >= depth);
        let pops = rng.gen_range(min_pop..=stack.len());
        stack.truncate(stack.len() - pops);
        match stack.last() {
            Some(&p) => {
                ops[i].parent = Some(p);
                ops[p].children.push(i);
            }
            None => roots.push(i),
        }
        stack.push(i);
    }
    // Children always come after their parent, so a reverse pass sees them first.
    for i in (0..ops.len()).rev() {
        let child_sum: u64 = ops[i].children.iter().map(|&c| ops[c].dur_us).sum();
        ops[i].dur_us = ops[i].self_us + child_sum;
        ops[i].pre_us = rng.gen_range(0..=ops[i].self_us);
    }
    let mut cursor = 0u64;
    let mut todo: Vec<usize> = Vec::new();
    for &r in &roots {
        if cursor > 0 {
            cursor += rng.gen_range(0..=5);
        }
        ops[r].start_us = cursor;
        cursor += ops[r].dur_us;
        todo.push(r);
        while let Some(i) = todo.pop() {
            let mut t = ops[i].start_us + ops[i].pre_us;
            for c in ops[i].children.clone() {
                ops[c].start_us = t;
                t += ops[c].dur_us;
                todo.push(c);
            }
        }
    }
    let cpu_end = cursor;

    let mut events: Vec<OperatorEvent> = ops
        .iter()
        .enumerate()
        .map(|(i, op)| {
            let mut e = OperatorEvent::new(i as u64 + 1, op.name.clone(), EventKind::CpuOp, op.start_us, op.dur_us);
            e.track = CPU_TRACK;
            e.parent_id = op.parent.map(|p| p as u64 + 1);
            e
        })
        .collect();

    // Kernels: (launcher index or None, name, duration, release time).
    let mut kernels: Vec<(Option<usize>, String, u64, u64)> = Vec::new();
    for (g, b) in &plan.gpu {
        let same_group: Vec<usize> = (0..ops.len()).filter(|&i| ops[i].group == *g).collect();
        for (name, dur) in expand(b, &mut rng) {
            let launcher = if *g == OperatorGroup::Uncategorized {
                None
            } else if name == INHERITING_KERNEL {
                Some(*same_group.choose(&mut rng).expect("checked before realize"))
            } else if ops.is_empty() {
                None
            } else {
                Some(rng.gen_range(0..ops.len()))
            };
            let release = match launcher {
                Some(l) => ops[l].start_us,
                None => rng.gen_range(0..=cpu_end),
            };
            kernels.push((launcher, name, dur, release));
        }
    }
    kernels.sort_by_key(|k| k.3);
    let mut gpu_cursor = 0u64;
    let mut next_id = events.len() as u64 + 1;
    for (launcher, name, dur, release) in kernels {
        let start = gpu_cursor.max(release);
        gpu_cursor = start + dur;
        let mut e = OperatorEvent::new(next_id, name, EventKind::GpuKernel, start, dur);
        next_id += 1;
        e.track = GPU_TRACK;
        if let Some(l) = launcher {
            let corr = l as u64 + 1;
            events[l].correlation_id = Some(corr);
            e.correlation_id = Some(corr);
        }
        events.push(e);
    }

    if let Some(p) = &spec.phases {
        events.push(OperatorEvent { track: MARKER_TRACK, ..OperatorEvent::new(next_id, "prefill", EventKind::Marker, 0, p.prefill_us) });
        next_id += 1;
        for i in 0..p.decode_tokens {
            let ts = p.prefill_us + i * p.decode_gap_us;
            events.push(OperatorEvent { track: MARKER_TRACK, ..OperatorEvent::new(next_id, "decode", EventKind::Marker, ts, 0) });
            next_id += 1;
        }
    }

    let end = events.iter().map(|e| e.end_us()).max().unwrap_or(0);
    let energy_samples = match &spec.energy {
        Some(plan) if plan.interval_us > 0 => {
            let mut v: Vec<EnergySample> =
                (0..=end / plan.interval_us).map(|i| EnergySample { ts_us: i * plan.interval_us, watts: plan.watts }).collect();
            if v.last().is_some_and(|s| s.ts_us < end) {
                v.push(EnergySample { ts_us: end, watts: plan.watts });
            }
            v
        }
        _ => Vec::new(),
    };
    Trace { meta: plan.meta.clone(), events, energy_samples }
}

fn check_kernels(plan: &Plan) -> Result<(), SynthError> {
    for (g, b) in &plan.gpu {
        let inherits = b.names.iter().any(|(n, _)| n == INHERITING_KERNEL);
        if inherits && plan.cpu.get(g).map_or(0, Bucket::count) == 0 {
            return Err(infeasible(format!("{g} kernels need a {g} CpuOp to inherit from")));
        }
    }
    Ok(())
}

/// Builds the trace described by `spec` and, when a variant is given, its
/// counterpart. Names are checked against the builtin rules.
pub fn generate(spec: &SynthSpec) -> Result<SynthOutput, SynthError> {
    let rules = Ruleset::builtin();
    let base = base_plan(spec, &rules)?;
    check_kernels(&base)?;
    let counterpart_plan = spec.variant.as_ref().map(|v| variant_plan(&base, v, &rules)).transpose()?;
    if let Some(p) = &counterpart_plan {
        check_kernels(p)?;
    }
    let trace = realize(&base, spec, spec.seed);
    let counterpart = counterpart_plan.map(|p| realize(&p, spec, spec.seed ^ 0x9E37_79B9_7F4A_7C15));
    Ok(SynthOutput { trace, counterpart })
}
