//! ONNX Runtime profiling JSON reader.
//!
//! ORT writes one entry per session phase (`cat: "Session"`), three per node
//! execution (`_fence_before`, `_kernel_time`, `_fence_after` with
//! `cat: "Node"`), and, with GPU profiling enabled, device kernel records
//! (`cat: "Kernel"`). Nodes keep their execution provider in
//! `attrs.provider` so CPU fallback can be analyzed.

use std::collections::BTreeMap;

use serde_json::Value;

use super::{parse_json_lenient, IngestError, IngestReport, Parsed, TrackInterner};
use crate::trace_model::{assign_parents_by_containment, EventKind, OperatorEvent, Trace, Track};

const ORT_CATEGORIES: [&str; 3] = ["Node", "Session", "Kernel"];

pub(super) fn looks_like_ort_entry(v: &Value) -> bool {
    let cat_ok = v.get("cat").and_then(Value::as_str).is_some_and(|c| ORT_CATEGORIES.contains(&c));
    cat_ok && v.get("args").and_then(|a| a.get("op_name")).is_some()
}

fn shapes(args: &Value) -> Option<Vec<Vec<i64>>> {
    // [{"float":[1,3,224,224]}, ...]
    let list = args.get("input_type_shape")?.as_array()?;
    Some(
        list.iter()
            .map(|entry| {
                entry
                    .as_object()
                    .and_then(|o| o.values().next())
                    .and_then(Value::as_array)
                    .and_then(|xs| xs.iter().map(Value::as_i64).collect::<Option<Vec<_>>>())
                    .unwrap_or_default()
            })
            .collect(),
    )
}

pub fn parse_ort(bytes: &[u8]) -> Result<Parsed, IngestError> {
    let root = parse_json_lenient(bytes)?;
    let entries = root
        .as_array()
        .ok_or_else(|| IngestError::json(None, "ORT profile must be a JSON array"))?;
    let mut report = IngestReport { records: entries.len(), ..Default::default() };
    let mut tracks = TrackInterner::default();

    let num = |v: &Value, k: &str| v.get(k).and_then(|x| x.as_u64().or_else(|| x.as_f64().map(|f| f.max(0.0).round() as u64)));
    let origin = entries.iter().filter_map(|e| num(e, "ts")).min().unwrap_or(0);

    let mut events = Vec::new();
    let mut next_id = 1u64;
    for e in entries {
        let cat = e.get("cat").and_then(Value::as_str).unwrap_or("");
        let raw_name = e.get("name").and_then(Value::as_str).unwrap_or("").to_string();
        let kind = match cat {
            "Node" => EventKind::CpuOp,
            "Kernel" => EventKind::GpuKernel,
            "Session" => EventKind::Marker,
            other => {
                report.skip(format!("unsupported category '{other}'"));
                continue;
            }
        };
        if kind == EventKind::CpuOp && (raw_name.ends_with("_fence_before") || raw_name.ends_with("_fence_after")) {
            report.skip("fence");
            continue;
        }
        let (Some(ts), Some(dur)) = (num(e, "ts"), num(e, "dur")) else {
            report.skip("no duration");
            report.warn(format!("ORT entry '{raw_name}' has no duration; dropped"));
            continue;
        };
        let args = e.get("args").cloned().unwrap_or(Value::Null);
        let op_name = args.get("op_name").and_then(Value::as_str);
        let name = match (kind, op_name) {
            (EventKind::CpuOp, Some(op)) => op.to_string(),
            (EventKind::CpuOp, None) => {
                report.warn(format!("ORT node '{raw_name}' has no op_name; using raw name"));
                raw_name.clone()
            }
            _ => raw_name.clone(),
        };
        let mut ev = OperatorEvent::new(next_id, name, kind, ts - origin, dur);
        next_id += 1;
        ev.track = Track::new(tracks.id(e.get("pid")), tracks.id(e.get("tid")));
        if kind == EventKind::CpuOp {
            ev.attrs.insert("node".into(), raw_name);
        }
        if let Some(p) = args.get("provider").and_then(Value::as_str) {
            ev.attrs.insert("provider".into(), p.to_string());
        }
        if kind == EventKind::GpuKernel {
            if let Some(op) = op_name {
                ev.attrs.insert("op_name".into(), op.to_string());
            }
        }
        ev.correlation_id = args.get("correlation").and_then(Value::as_u64);
        ev.tensor_shapes = shapes(&args);
        events.push(ev);
        report.converted += 1;
    }

    // Kernel correlations must point at exactly one node.
    let mut node_corr: BTreeMap<u64, usize> = BTreeMap::new();
    for ev in events.iter().filter(|e| e.kind == EventKind::CpuOp) {
        if let Some(c) = ev.correlation_id {
            *node_corr.entry(c).or_default() += 1;
        }
    }
    for ev in events.iter_mut() {
        if let Some(c) = ev.correlation_id {
            let ok = match ev.kind {
                EventKind::GpuKernel => node_corr.get(&c) == Some(&1),
                EventKind::CpuOp => true,
                _ => false,
            };
            if !ok {
                ev.correlation_id = None;
            }
        }
    }

    assign_parents_by_containment(&mut events)?;
    let trace = Trace { events, ..Default::default() };
    trace.validate()?;
    Ok(Parsed { trace, report })
}

/// Number of events per `attrs.provider` value.
pub fn provider_counts(trace: &Trace) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for e in &trace.events {
        if let Some(p) = e.attrs.get("provider") {
            *counts.entry(p.clone()).or_default() += 1;
        }
    }
    counts
}
