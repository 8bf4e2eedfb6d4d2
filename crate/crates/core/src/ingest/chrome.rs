//! Chrome Trace Event Format reader.
//!
//! Complete (`X`) events and folded `B`/`E` pairs become operator events;
//! instant events become markers; counters with power-like names become
//! energy samples. Timestamps (fractional µs) are shifted to the earliest
//! event and rounded per endpoint, which keeps nesting intact.

use std::collections::{BTreeMap, HashMap, HashSet};

use regex::Regex;
use serde_json::{Map, Value};

use super::{meta_from_json, parse_json_lenient, IngestError, IngestReport, Parsed, TrackInterner};
use crate::trace_model::{assign_parents_by_containment, EnergySample, EventKind, OperatorEvent, Trace, Track};

/// Predicates deciding how Chrome events map onto event kinds.
#[derive(Clone, Debug)]
pub struct ChromeOptions {
    /// Categories treated as GPU kernels.
    pub kernel_category: Regex,
    /// Process/thread names (from `M` events) marking device streams.
    pub device_track: Regex,
    /// Categories treated as markers: annotations and Python frames, which
    /// wrap operators and must not absorb self-time.
    pub marker_category: Regex,
    /// Counter names interpreted as power in watts.
    pub power_counter: Regex,
}

impl Default for ChromeOptions {
    fn default() -> Self {
        Self {
            kernel_category: Regex::new(r"(?i)kernel|gpu").unwrap(),
            device_track: Regex::new(r"(?i)(^|\W)(stream|gpu|cuda)(\W|$)").unwrap(),
            marker_category: Regex::new(r"(?i)^(user_annotation|gpu_user_annotation|trace|python_function)$").unwrap(),
            power_counter: Regex::new(r"(?i)power|watt").unwrap(),
        }
    }
}

pub fn parse_chrome(bytes: &[u8]) -> Result<Parsed, IngestError> {
    parse_chrome_with(bytes, &ChromeOptions::default())
}

/// An unmatched `B` event: name, cat, ts, args.
type OpenSpan = (String, String, f64, Option<Map<String, Value>>);

struct Span {
    name: String,
    cat: String,
    track: Track,
    ts: f64,
    end: f64,
    args: Option<Map<String, Value>>,
}

fn num(v: Option<&Value>) -> Option<f64> {
    match v? {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.parse().ok(),
        _ => None,
    }
}

fn str_field<'a>(ev: &'a Value, key: &str) -> &'a str {
    ev.get(key).and_then(Value::as_str).unwrap_or("")
}

fn shapes_from_args(args: &Map<String, Value>) -> Option<Vec<Vec<i64>>> {
    let dims = args.get("Input Dims")?.as_array()?;
    Some(
        dims.iter()
            .map(|d| {
                d.as_array()
                    .and_then(|xs| xs.iter().map(Value::as_i64).collect::<Option<Vec<_>>>())
                    .unwrap_or_default()
            })
            .collect(),
    )
}

pub fn parse_chrome_with(bytes: &[u8], opts: &ChromeOptions) -> Result<Parsed, IngestError> {
    let root = parse_json_lenient(bytes)?;
    let (events, meta) = match &root {
        Value::Object(obj) => {
            let events = obj
                .get("traceEvents")
                .and_then(Value::as_array)
                .ok_or_else(|| IngestError::json(None, "missing traceEvents array"))?;
            let meta = ["otherData", "metadata"]
                .iter()
                .filter_map(|k| obj.get(*k))
                .map(meta_from_json)
                .fold(Default::default(), |mut acc: crate::trace_model::TraceMeta, m| {
                    acc.merge_missing(&m);
                    acc
                });
            (events.as_slice(), meta)
        }
        Value::Array(items) => (items.as_slice(), Default::default()),
        _ => return Err(IngestError::json(None, "expected a JSON object or array")),
    };

    let mut report = IngestReport { records: events.len(), ..Default::default() };
    let mut tracks = TrackInterner::default();

    // Pass 1: device tracks from metadata, B/E folding.
    let mut device_tracks: HashSet<Track> = HashSet::new();
    let mut device_pids: HashSet<u64> = HashSet::new();
    let mut spans: Vec<Span> = Vec::new();
    let mut instants: Vec<(String, Track, f64)> = Vec::new();
    let mut counters: Vec<(String, f64, Map<String, Value>, Track)> = Vec::new();
    let mut flows: Vec<(char, u64, Track, f64)> = Vec::new();
    let mut open: HashMap<Track, Vec<OpenSpan>> = HashMap::new();

    for ev in events {
        let Some(obj) = ev.as_object() else {
            report.skip("not an object");
            continue;
        };
        let ph = str_field(ev, "ph");
        let track = Track::new(tracks.id(obj.get("pid")), tracks.id(obj.get("tid")));
        let name = str_field(ev, "name").to_string();
        let cat = str_field(ev, "cat").to_string();
        let ts = num(obj.get("ts"));
        let args = obj.get("args").and_then(Value::as_object).cloned();
        match ph {
            "M" => {
                let label = args.as_ref().and_then(|a| a.get("name").or(a.get("labels"))).and_then(Value::as_str);
                if let Some(label) = label {
                    if opts.device_track.is_match(label) {
                        match name.as_str() {
                            "process_name" | "process_labels" => {
                                device_pids.insert(track.pid);
                            }
                            "thread_name" => {
                                device_tracks.insert(track);
                            }
                            _ => {}
                        }
                    }
                }
                report.skip("metadata");
            }
            "X" => match (ts, num(obj.get("dur"))) {
                (Some(ts), Some(dur)) if dur >= 0.0 && ts.is_finite() && dur.is_finite() => {
                    spans.push(Span { name, cat, track, ts, end: ts + dur, args })
                }
                _ => {
                    report.skip("missing or invalid ts/dur");
                    report.warn(format!("X event '{name}' has no usable ts/dur"));
                }
            },
            "B" => match ts {
                Some(ts) => {
                    open.entry(track).or_default().push((name, cat, ts, args));
                }
                None => report.skip("missing or invalid ts/dur"),
            },
            "E" => {
                let begin = open.get_mut(&track).and_then(Vec::pop);
                match (begin, ts) {
                    (Some((bname, bcat, bts, bargs)), Some(ts)) if ts >= bts => {
                        spans.push(Span { name: bname, cat: bcat, track, ts: bts, end: ts, args: bargs });
                        // The B record is the converted one; E is bookkeeping.
                        report.skip("end of B/E pair");
                    }
                    (Some((bname, ..)), _) => {
                        return Err(IngestError::UnmatchedBeginEnd { phase: 'E', name: bname, track });
                    }
                    (None, _) => return Err(IngestError::UnmatchedBeginEnd { phase: 'E', name, track }),
                }
            }
            "i" | "I" | "R" => match ts {
                Some(ts) => instants.push((name, track, ts)),
                None => report.skip("missing or invalid ts/dur"),
            },
            "C" => match (ts, args) {
                (Some(ts), Some(args)) => counters.push((name, ts, args, track)),
                _ => report.skip("counter without ts/args"),
            },
            "s" | "t" | "f" => {
                let id = obj.get("id").and_then(|v| v.as_u64().or_else(|| v.as_str().and_then(|s| s.parse().ok())));
                match (id, ts) {
                    (Some(id), Some(ts)) => {
                        flows.push((ph.chars().next().unwrap(), id, track, ts));
                        report.skip("flow");
                    }
                    _ => report.skip("flow without id/ts"),
                }
            }
            other => report.skip(format!("unsupported phase '{other}'")),
        }
    }
    if let Some((track, stack)) = open.iter().find(|(_, s)| !s.is_empty()) {
        return Err(IngestError::UnmatchedBeginEnd { phase: 'B', name: stack[0].0.clone(), track: *track });
    }

    let origin = spans
        .iter()
        .map(|s| s.ts)
        .chain(instants.iter().map(|i| i.2))
        .chain(counters.iter().map(|c| c.1))
        .fold(f64::INFINITY, f64::min);
    let origin = if origin.is_finite() { origin } else { 0.0 };
    let rel = |t: f64| -> u64 { (t - origin).round().max(0.0) as u64 };

    let mut out: Vec<OperatorEvent> = Vec::with_capacity(spans.len() + instants.len());
    let mut next_id = 1u64;
    for s in spans {
        let is_device = device_tracks.contains(&s.track) || device_pids.contains(&s.track.pid);
        let kind = if opts.marker_category.is_match(&s.cat) {
            EventKind::Marker
        } else if opts.kernel_category.is_match(&s.cat) || is_device {
            EventKind::GpuKernel
        } else {
            EventKind::CpuOp
        };
        let start = rel(s.ts);
        let end = rel(s.end).max(start);
        let mut ev = OperatorEvent::new(next_id, s.name, kind, start, end - start);
        next_id += 1;
        ev.track = s.track;
        if !s.cat.is_empty() {
            ev.attrs.insert("cat".into(), s.cat);
        }
        if let Some(args) = &s.args {
            ev.correlation_id = args.get("correlation").and_then(Value::as_u64);
            ev.tensor_shapes = shapes_from_args(args);
            if let Some(x) = args.get("External id").and_then(Value::as_u64) {
                ev.attrs.insert("external_id".into(), x.to_string());
            }
            for key in ["device", "stream", "provider"] {
                if let Some(v) = args.get(key) {
                    let v = v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string());
                    ev.attrs.insert(key.into(), v);
                }
            }
        }
        out.push(ev);
        report.converted += 1;
    }
    for (name, track, ts) in instants {
        let mut ev = OperatorEvent::new(next_id, name, EventKind::Marker, rel(ts), 0);
        next_id += 1;
        ev.track = track;
        out.push(ev);
        report.converted += 1;
    }

    let mut energy = Vec::new();
    for (name, ts, args, track) in counters {
        let power_key = args.keys().find(|k| opts.power_counter.is_match(k)).cloned();
        let is_power = opts.power_counter.is_match(&name) || power_key.is_some();
        let value = power_key
            .as_ref()
            .and_then(|k| num(args.get(k)))
            .or_else(|| args.values().find_map(|v| num(Some(v))));
        match (is_power, value) {
            (true, Some(w)) if w >= 0.0 && w.is_finite() => {
                energy.push(EnergySample { ts_us: rel(ts), watts: w });
                report.converted += 1;
            }
            (true, _) => report.skip("power counter without valid value"),
            (false, v) => {
                let mut ev = OperatorEvent::new(next_id, name, EventKind::CounterSample, rel(ts), 0);
                next_id += 1;
                ev.track = track;
                if let Some(v) = v {
                    ev.attrs.insert("value".into(), v.to_string());
                }
                out.push(ev);
                report.converted += 1;
            }
        }
    }
    energy.sort_by_key(|s| s.ts_us);

    link_flows(&mut out, &flows, origin);
    sanitize_correlations(&mut out, &mut report);
    assign_parents_by_containment(&mut out)?;

    let trace = Trace { meta, events: out, energy_samples: energy };
    trace.validate()?;
    Ok(Parsed { trace, report })
}

/// Resolves `ac2g`-style flow pairs onto the enclosing events at each end,
/// for events that did not already carry `args.correlation`.
fn link_flows(events: &mut [OperatorEvent], flows: &[(char, u64, Track, f64)], origin: f64) {
    if flows.is_empty() {
        return;
    }
    let mut by_track: BTreeMap<Track, Vec<usize>> = BTreeMap::new();
    for (i, e) in events.iter().enumerate() {
        if matches!(e.kind, EventKind::CpuOp | EventKind::GpuKernel) {
            by_track.entry(e.track).or_default().push(i);
        }
    }
    for (phase, id, track, ts) in flows {
        let t = (ts - origin).round().max(0.0) as u64;
        let Some(cands) = by_track.get(track) else { continue };
        // Innermost enclosing event: latest start among those containing t.
        let hit = cands
            .iter()
            .copied()
            .filter(|&i| events[i].start_us <= t && t <= events[i].end_us())
            .max_by_key(|&i| (events[i].start_us, std::cmp::Reverse(events[i].duration_us)));
        if let Some(i) = hit {
            let want = match phase {
                's' => EventKind::CpuOp,
                _ => EventKind::GpuKernel,
            };
            if events[i].kind == want && events[i].correlation_id.is_none() {
                events[i].correlation_id = Some(*id);
            }
        }
    }
}

/// Drops kernel correlations that do not resolve to exactly one CPU op.
fn sanitize_correlations(events: &mut [OperatorEvent], report: &mut IngestReport) {
    let mut cpu_count: HashMap<u64, usize> = HashMap::new();
    for e in events.iter().filter(|e| e.kind == EventKind::CpuOp) {
        if let Some(c) = e.correlation_id {
            *cpu_count.entry(c).or_default() += 1;
        }
    }
    for e in events.iter_mut().filter(|e| e.kind == EventKind::GpuKernel) {
        if let Some(c) = e.correlation_id {
            let n = cpu_count.get(&c).copied().unwrap_or(0);
            if n != 1 {
                report.warn(format!("kernel '{}' correlation {c} matches {n} cpu ops; unlinked", e.name));
                e.correlation_id = None;
            }
        }
    }
    // Correlations on non-CPU/GPU events carry no meaning downstream.
    for e in events.iter_mut().filter(|e| !matches!(e.kind, EventKind::CpuOp | EventKind::GpuKernel)) {
        e.correlation_id = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_complete_event() {
        let p = parse_chrome(br#"{"traceEvents":[{"ph":"X","name":"aten::linear","ts":0,"dur":500,"pid":1,"tid":1}]}"#).unwrap();
        assert_eq!(p.trace.events.len(), 1);
        let e = &p.trace.events[0];
        assert_eq!((e.kind, e.duration_us, e.name.as_str()), (EventKind::CpuOp, 500, "aten::linear"));
        assert!(p.report.is_balanced());
    }

    #[test]
    fn kernel_linked_by_correlation() {
        let p = parse_chrome(
            br#"{"traceEvents":[
              {"ph":"X","cat":"cpu_op","name":"aten::gelu","ts":100,"dur":30,"pid":1,"tid":1,"args":{"correlation":7}},
              {"ph":"X","cat":"kernel","name":"elementwise_kernel","ts":140,"dur":80,"pid":0,"tid":7,"args":{"correlation":7}}
            ]}"#,
        )
        .unwrap();
        let k = p.trace.events.iter().find(|e| e.kind == EventKind::GpuKernel).unwrap();
        assert_eq!(k.correlation_id, Some(7));
        let tree = crate::trace_model::build_event_trees(&p.trace).unwrap();
        assert_eq!(tree.kernel_owner(k.id), Some(1));
    }

    #[test]
    fn device_track_from_metadata() {
        let p = parse_chrome(
            br#"[
              {"ph":"M","name":"thread_name","pid":0,"tid":7,"args":{"name":"stream 7"}},
              {"ph":"X","cat":"","name":"some_kernel","ts":0,"dur":10,"pid":0,"tid":7}
            ]"#,
        )
        .unwrap();
        assert_eq!(p.trace.events[0].kind, EventKind::GpuKernel);
        assert_eq!(p.report.skipped["metadata"], 1);
    }

    #[test]
    fn flow_events_link_launch_to_kernel() {
        let p = parse_chrome(
            br#"[
              {"ph":"X","cat":"cuda_runtime","name":"cudaLaunchKernel","ts":10,"dur":5,"pid":1,"tid":1},
              {"ph":"s","cat":"ac2g","name":"ac2g","id":42,"ts":10,"pid":1,"tid":1},
              {"ph":"X","cat":"kernel","name":"k","ts":30,"dur":5,"pid":0,"tid":7},
              {"ph":"f","cat":"ac2g","name":"ac2g","id":42,"ts":30,"pid":0,"tid":7,"bp":"e"}
            ]"#,
        )
        .unwrap();
        assert!(p.trace.events.iter().all(|e| e.correlation_id == Some(42)));
        assert!(p.report.is_balanced());
    }

    #[test]
    fn begin_end_folded() {
        let p = parse_chrome(
            br#"[
              {"ph":"B","name":"outer","ts":0,"pid":1,"tid":1},
              {"ph":"B","name":"inner","ts":2,"pid":1,"tid":1},
              {"ph":"E","ts":5,"pid":1,"tid":1},
              {"ph":"E","ts":10,"pid":1,"tid":1}
            ]"#,
        )
        .unwrap();
        let inner = p.trace.events.iter().find(|e| e.name == "inner").unwrap();
        let outer = p.trace.events.iter().find(|e| e.name == "outer").unwrap();
        assert_eq!((inner.start_us, inner.duration_us), (2, 3));
        assert_eq!(inner.parent_id, Some(outer.id));
        assert!(p.report.is_balanced());
    }

    #[test]
    fn unmatched_begin_end_is_error() {
        let err = parse_chrome(br#"[{"ph":"B","name":"a","ts":0,"pid":1,"tid":1}]"#).unwrap_err();
        assert!(matches!(err, IngestError::UnmatchedBeginEnd { phase: 'B', .. }));
        let err = parse_chrome(br#"[{"ph":"E","name":"a","ts":0,"pid":1,"tid":1}]"#).unwrap_err();
        assert!(matches!(err, IngestError::UnmatchedBeginEnd { phase: 'E', .. }));
    }

    #[test]
    fn partial_overlap_rejected() {
        let err = parse_chrome(
            br#"[{"ph":"X","name":"a","ts":0,"dur":10,"pid":1,"tid":1},{"ph":"X","name":"b","ts":5,"dur":10,"pid":1,"tid":1}]"#,
        )
        .unwrap_err();
        assert!(matches!(err, IngestError::Trace(crate::trace_model::TraceError::ChildEscapesParent { .. })));
    }

    #[test]
    fn counters_instants_and_shapes() {
        let p = parse_chrome(
            br#"{"traceEvents":[
              {"ph":"C","name":"GPU Power","ts":0,"pid":1,"args":{"power_w":10}},
              {"ph":"C","name":"GPU Power","ts":2000000,"pid":1,"args":{"power_w":10}},
              {"ph":"C","name":"mem","ts":5,"pid":1,"args":{"bytes":100}},
              {"ph":"i","name":"decode","ts":7,"pid":1,"tid":1,"s":"t"},
              {"ph":"X","name":"aten::add","ts":1,"dur":2,"pid":1,"tid":1,"args":{"Input Dims":[[2,3],[],[2,3]]}},
              {"ph":"P","name":"sample","ts":3,"pid":1,"tid":1}
            ], "otherData": {"model": "toy", "batch_size": 4}}"#,
        )
        .unwrap();
        assert_eq!(p.trace.energy_samples.len(), 2);
        assert_eq!(crate::trace_model::total_energy_joules(&p.trace), Some(20.0));
        assert!(p.trace.events.iter().any(|e| e.kind == EventKind::CounterSample && e.name == "mem"));
        assert!(p.trace.events.iter().any(|e| e.kind == EventKind::Marker && e.name == "decode"));
        let add = p.trace.events.iter().find(|e| e.name == "aten::add").unwrap();
        assert_eq!(add.tensor_shapes, Some(vec![vec![2, 3], vec![], vec![2, 3]]));
        assert_eq!(p.report.skipped["unsupported phase 'P'"], 1);
        assert_eq!(p.trace.meta.model.as_deref(), Some("toy"));
        assert_eq!(p.trace.meta.batch_size, Some(4));
        assert!(p.report.is_balanced());
    }

    #[test]
    fn fractional_timestamps_keep_nesting() {
        let p = parse_chrome(
            br#"[{"ph":"X","name":"p","ts":1000.4,"dur":10.2,"pid":1,"tid":1},{"ph":"X","name":"c","ts":1000.6,"dur":9.9,"pid":1,"tid":1}]"#,
        )
        .unwrap();
        let c = p.trace.events.iter().find(|e| e.name == "c").unwrap();
        assert_eq!(c.parent_id, Some(1));
        crate::trace_model::build_event_trees(&p.trace).unwrap();
    }

    #[test]
    fn malformed_json_error() {
        assert!(matches!(parse_chrome(b"{\"traceEvents\": [ {"), Err(IngestError::MalformedJson { .. })));
    }
}
