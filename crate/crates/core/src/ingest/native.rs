//! Native JSONL trace format.
//!
//! Line 1 is a header `{"schema":"opchar/v1","meta":{...}}`. Each following
//! line is either an event or an energy sample (`{"energy":{"ts":..,"w":..}}`).
//! Field order is fixed so exports are byte-for-byte reproducible.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{IngestError, IngestReport, Parsed};
use crate::trace_model::{EnergySample, EventKind, OperatorEvent, Trace, TraceMeta, Track};

pub const NATIVE_SCHEMA: &str = "opchar/v1";

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    #[serde(default)]
    meta: TraceMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EventLine {
    id: u64,
    name: String,
    kind: EventKind,
    ts: u64,
    dur: u64,
    pid: u64,
    tid: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parent: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    corr: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shapes: Option<Vec<Vec<i64>>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    attrs: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct EnergyPoint {
    ts: u64,
    w: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnergyLine {
    energy: EnergyPoint,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Line {
    Energy(EnergyLine),
    Event(EventLine),
}

pub fn parse_native(bytes: &[u8]) -> Result<Parsed, IngestError> {
    let text = std::str::from_utf8(bytes).map_err(|e| IngestError::json(Some(1), e))?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());

    let (_, first) = lines.next().ok_or_else(|| IngestError::json(Some(1), "empty input"))?;
    let header: Header = serde_json::from_str(first).map_err(|e| IngestError::json(Some(1), e))?;
    if header.schema != NATIVE_SCHEMA {
        return Err(IngestError::SchemaVersionMismatch { found: header.schema, expected: NATIVE_SCHEMA });
    }

    let mut trace = Trace { meta: header.meta, ..Default::default() };
    let mut report = IngestReport::default();
    for (i, line) in lines {
        report.records += 1;
        let parsed: Line = serde_json::from_str(line).map_err(|e| IngestError::json(Some(i + 1), e))?;
        match parsed {
            Line::Energy(EnergyLine { energy }) => trace.energy_samples.push(EnergySample { ts_us: energy.ts, watts: energy.w }),
            Line::Event(e) => trace.events.push(OperatorEvent {
                id: e.id,
                name: e.name,
                kind: e.kind,
                start_us: e.ts,
                duration_us: e.dur,
                track: Track::new(e.pid, e.tid),
                parent_id: e.parent,
                correlation_id: e.corr,
                tensor_shapes: e.shapes,
                attrs: e.attrs,
            }),
        }
        report.converted += 1;
    }
    trace.validate()?;
    Ok(Parsed { trace, report })
}

pub fn export_native(trace: &Trace) -> Vec<u8> {
    let mut out = Vec::new();
    let header = Header { schema: NATIVE_SCHEMA.to_string(), meta: trace.meta.clone() };
    serde_json::to_writer(&mut out, &header).expect("header serializes");
    out.push(b'\n');
    for e in &trace.events {
        let line = EventLine {
            id: e.id,
            name: e.name.clone(),
            kind: e.kind,
            ts: e.start_us,
            dur: e.duration_us,
            pid: e.track.pid,
            tid: e.track.tid,
            parent: e.parent_id,
            corr: e.correlation_id,
            shapes: e.tensor_shapes.clone(),
            attrs: e.attrs.clone(),
        };
        serde_json::to_writer(&mut out, &line).expect("event serializes");
        out.push(b'\n');
    }
    for s in &trace.energy_samples {
        let line = EnergyLine { energy: EnergyPoint { ts: s.ts_us, w: s.watts } };
        serde_json::to_writer(&mut out, &line).expect("energy serializes");
        out.push(b'\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Trace {
        let mut t = Trace::new(vec![
            OperatorEvent::new(1, "aten::linear", EventKind::CpuOp, 0, 100).on_track(1, 1),
            OperatorEvent::new(2, "aten::addmm", EventKind::CpuOp, 10, 80).on_track(1, 1).with_parent(1).with_correlation(7),
            OperatorEvent::new(3, "sm80_gemm", EventKind::GpuKernel, 20, 50).on_track(0, 7).with_correlation(7).with_attr("stream", "7"),
        ]);
        t.events[0].tensor_shapes = Some(vec![vec![4, 16], vec![]]);
        t.meta.model = Some("toy".into());
        t.meta.seq_len = Some(128);
        t.energy_samples = vec![EnergySample { ts_us: 0, watts: 100.5 }, EnergySample { ts_us: 1000, watts: 120.0 }];
        t
    }

    #[test]
    fn round_trip_is_identity() {
        let t = sample();
        let bytes = export_native(&t);
        let back = parse_native(&bytes).unwrap();
        assert_eq!(back.trace, t);
        assert_eq!(export_native(&back.trace), bytes);
        assert!(back.report.is_balanced());
    }

    #[test]
    fn header_shape() {
        let bytes = export_native(&sample());
        let first = std::str::from_utf8(&bytes).unwrap().lines().next().unwrap().to_string();
        assert_eq!(first, r#"{"schema":"opchar/v1","meta":{"model":"toy","seq_len":128}}"#);
    }

    #[test]
    fn schema_mismatch() {
        match parse_native(b"{\"schema\":\"opchar/v0\"}\n") {
            Err(IngestError::SchemaVersionMismatch { found, .. }) => assert_eq!(found, "opchar/v0"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_number() {
        let input = b"{\"schema\":\"opchar/v1\"}\n{\"id\":1,\"name\":\"a\",\"kind\":\"cpu\",\"ts\":0,\"dur\":1,\"pid\":1,\"tid\":1}\n{oops\n";
        match parse_native(input) {
            Err(IngestError::MalformedJson { line, .. }) => assert_eq!(line, Some(3)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_structure_rejected() {
        let input = b"{\"schema\":\"opchar/v1\"}\n{\"id\":1,\"name\":\"a\",\"kind\":\"cpu\",\"ts\":0,\"dur\":1,\"pid\":1,\"tid\":1,\"parent\":9}\n";
        assert!(matches!(parse_native(input), Err(IngestError::Trace(_))));
    }

    fn arb_event() -> impl Strategy<Value = (String, u8, u64, u64, Option<u64>, BTreeMap<String, String>)> {
        (
            "[a-z:_]{1,12}",
            0u8..4,
            0u64..1_000_000,
            0u64..10_000,
            proptest::option::of(0u64..50),
            proptest::collection::btree_map("[a-z]{1,4}", "[ -~]{0,6}", 0..3),
        )
    }

    proptest! {
        #[test]
        fn flat_traces_round_trip(evs in proptest::collection::vec(arb_event(), 0..40), w in proptest::collection::vec(0.0f64..500.0, 0..4)) {
            let kinds = [EventKind::CpuOp, EventKind::GpuKernel, EventKind::Marker, EventKind::CounterSample];
            // One event per track keeps every generated trace valid without nesting.
            let events: Vec<_> = evs.into_iter().enumerate().map(|(i, (name, k, ts, dur, corr, attrs))| {
                let mut e = OperatorEvent::new(i as u64 + 1, name, kinds[k as usize], ts, dur).on_track(1, i as u64);
                e.attrs = attrs;
                if e.kind == EventKind::CpuOp { e.correlation_id = corr; }
                e
            }).collect();
            let mut t = Trace::new(events);
            t.energy_samples = w.into_iter().enumerate().map(|(i, watts)| EnergySample { ts_us: i as u64 * 10, watts }).collect();
            let bytes = export_native(&t);
            let back = parse_native(&bytes).unwrap();
            prop_assert_eq!(&back.trace, &t);
            prop_assert_eq!(export_native(&back.trace), bytes);
        }
    }
}
