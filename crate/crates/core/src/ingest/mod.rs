//! Parsing of external profiler formats into [`Trace`].
//!
//! Three formats are accepted: Chrome Trace Event JSON (PyTorch profiler
//! exports), ONNX Runtime profiling JSON, and the native `opchar/v1` JSONL
//! format which also serves as the interchange format between subcommands.
//! Every parser returns an [`IngestReport`] next to the trace: each input
//! record is either converted or counted under a skip reason.

mod chrome;
mod native;
mod ort;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::Value;
use thiserror::Error;

use crate::trace_model::{Trace, TraceError, TraceMeta, Track};

pub use chrome::{parse_chrome, parse_chrome_with, ChromeOptions};
pub use native::{export_native, parse_native, NATIVE_SCHEMA};
pub use ort::{parse_ort, provider_counts};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TraceFormat {
    ChromeTraceEvent,
    OrtProfile,
    NativeJsonl,
}

impl fmt::Display for TraceFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TraceFormat::ChromeTraceEvent => "chrome",
            TraceFormat::OrtProfile => "ort",
            TraceFormat::NativeJsonl => "native",
        })
    }
}

impl FromStr for TraceFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "chrome" | "chrome-trace" => Ok(TraceFormat::ChromeTraceEvent),
            "ort" | "onnxruntime" => Ok(TraceFormat::OrtProfile),
            "native" | "jsonl" | "opchar" => Ok(TraceFormat::NativeJsonl),
            other => Err(format!("unknown trace format '{other}'")),
        }
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("unrecognized trace format (starts with {excerpt:?})")]
    UnrecognizedFormat { excerpt: String },
    #[error("malformed JSON{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    MalformedJson { line: Option<usize>, message: String },
    #[error("schema version mismatch: found '{found}', expected '{expected}'")]
    SchemaVersionMismatch { found: String, expected: &'static str },
    #[error("unmatched {phase} event '{name}' on track {track}")]
    UnmatchedBeginEnd { phase: char, name: String, track: Track },
    #[error("{0}")]
    Trace(#[from] TraceError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl IngestError {
    fn json(line: Option<usize>, err: impl fmt::Display) -> Self {
        IngestError::MalformedJson { line, message: err.to_string() }
    }
}

/// Accounting of what a parser did with each input record.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub records: usize,
    pub converted: usize,
    pub skipped: BTreeMap<String, usize>,
    pub warnings: Vec<String>,
}

impl IngestReport {
    pub(crate) fn skip(&mut self, reason: impl Into<String>) {
        *self.skipped.entry(reason.into()).or_default() += 1;
    }

    pub(crate) fn warn(&mut self, msg: impl Into<String>) {
        self.warnings.push(msg.into());
    }

    pub fn skipped_total(&self) -> usize {
        self.skipped.values().sum()
    }

    /// True when every record is accounted for.
    pub fn is_balanced(&self) -> bool {
        self.records == self.converted + self.skipped_total()
    }
}

#[derive(Clone, Debug)]
pub struct Parsed {
    pub trace: Trace,
    pub report: IngestReport,
}

fn excerpt(bytes: &[u8]) -> String {
    let end = bytes.len().min(40);
    String::from_utf8_lossy(&bytes[..end]).into_owned()
}

fn strip_bom(bytes: &[u8]) -> &[u8] {
    bytes.strip_prefix(b"\xEF\xBB\xBF").unwrap_or(bytes)
}

/// Parses a JSON document, accepting the Chrome array form with a missing
/// closing bracket.
pub(crate) fn parse_json_lenient(bytes: &[u8]) -> Result<Value, IngestError> {
    match serde_json::from_slice::<Value>(bytes) {
        Ok(v) => Ok(v),
        Err(err) => {
            let text = std::str::from_utf8(bytes).map_err(|e| IngestError::json(None, e))?;
            let trimmed = text.trim_end().trim_end_matches(',');
            if text.trim_start().starts_with('[') && !trimmed.ends_with(']') {
                if let Ok(v) = serde_json::from_str::<Value>(&format!("{trimmed}]")) {
                    return Ok(v);
                }
            }
            Err(IngestError::json(Some(err.line()), err))
        }
    }
}

pub fn detect_format(bytes: &[u8]) -> Result<TraceFormat, IngestError> {
    let bytes = strip_bom(bytes);
    let start = bytes.iter().position(|b| !b.is_ascii_whitespace());
    let Some(start) = start else {
        return Err(IngestError::UnrecognizedFormat { excerpt: String::new() });
    };
    let body = &bytes[start..];
    let unrecognized = || IngestError::UnrecognizedFormat { excerpt: excerpt(body) };

    let first_line = body.split(|&b| b == b'\n').next().unwrap_or(body);
    if let Ok(Value::Object(obj)) = serde_json::from_slice::<Value>(first_line) {
        if obj.contains_key("schema") {
            return Ok(TraceFormat::NativeJsonl);
        }
    }
    if body[0] != b'{' && body[0] != b'[' {
        return Err(unrecognized());
    }
    let value = parse_json_lenient(body).map_err(|_| unrecognized())?;
    match &value {
        Value::Object(obj) if obj.get("traceEvents").is_some_and(Value::is_array) => Ok(TraceFormat::ChromeTraceEvent),
        Value::Array(items) => {
            if items.iter().any(ort::looks_like_ort_entry) {
                Ok(TraceFormat::OrtProfile)
            } else if items.is_empty() || items.iter().any(|e| e.get("ph").is_some()) {
                Ok(TraceFormat::ChromeTraceEvent)
            } else {
                Err(unrecognized())
            }
        }
        _ => Err(unrecognized()),
    }
}

/// Parses `bytes` in the given format, or auto-detects when `None`.
pub fn parse_bytes(bytes: &[u8], format: Option<TraceFormat>) -> Result<Parsed, IngestError> {
    let format = match format {
        Some(f) => f,
        None => detect_format(bytes)?,
    };
    match format {
        TraceFormat::ChromeTraceEvent => parse_chrome(bytes),
        TraceFormat::OrtProfile => parse_ort(bytes),
        TraceFormat::NativeJsonl => parse_native(bytes),
    }
}

/// Sidecar metadata path written by capture tooling next to a trace file.
pub fn sidecar_path(trace_path: &Path) -> PathBuf {
    let mut os = trace_path.as_os_str().to_owned();
    os.push(".meta.json");
    PathBuf::from(os)
}

/// Reads trace metadata from a JSON object. Accepts common key spellings.
pub fn meta_from_json(value: &Value) -> TraceMeta {
    let get_str = |keys: &[&str]| {
        keys.iter().find_map(|k| match value.get(*k) {
            Some(Value::String(s)) => Some(s.clone()),
            Some(Value::Number(n)) => Some(n.to_string()),
            _ => None,
        })
    };
    let get_u64 = |keys: &[&str]| {
        keys.iter().find_map(|k| match value.get(*k) {
            Some(Value::Number(n)) => n.as_u64(),
            Some(Value::String(s)) => s.parse().ok(),
            _ => None,
        })
    };
    TraceMeta {
        model: get_str(&["model", "model_name"]),
        platform: get_str(&["platform", "device"]),
        flow: get_str(&["flow", "deployment_flow"]),
        precision: get_str(&["precision", "dtype"]),
        batch_size: get_u64(&["batch_size", "batch"]),
        seq_len: get_u64(&["seq_len", "sequence_length", "seq"]),
    }
}

pub fn read_sidecar_meta(path: &Path) -> Result<TraceMeta, IngestError> {
    let bytes = std::fs::read(path)?;
    let value: Value = serde_json::from_slice(&bytes).map_err(|e| IngestError::json(Some(e.line()), e))?;
    Ok(meta_from_json(&value))
}

/// Maps Chrome/ORT pid and tid values (numbers or strings) to integers.
/// Non-numeric strings get ids above 2^40 in first-seen order.
#[derive(Default)]
pub(crate) struct TrackInterner {
    names: BTreeMap<String, u64>,
}

impl TrackInterner {
    const BASE: u64 = 1 << 40;

    pub(crate) fn id(&mut self, v: Option<&Value>) -> u64 {
        match v {
            Some(Value::Number(n)) => n.as_u64().unwrap_or_else(|| n.as_f64().map(|f| f.max(0.0) as u64).unwrap_or(0)),
            Some(Value::String(s)) => {
                if let Ok(n) = s.trim().parse::<u64>() {
                    return n;
                }
                let next = Self::BASE + self.names.len() as u64;
                *self.names.entry(s.clone()).or_insert(next)
            }
            _ => 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_chrome_object() {
        let f = br#"{"traceEvents":[{"ph":"X","name":"a","ts":0,"dur":1,"pid":1,"tid":1}]}"#;
        assert_eq!(detect_format(f).unwrap(), TraceFormat::ChromeTraceEvent);
    }

    #[test]
    fn detects_chrome_bare_array() {
        let f = br#"[{"ph":"X","name":"a","ts":0,"dur":1,"pid":1,"tid":1},"#;
        assert_eq!(detect_format(f).unwrap(), TraceFormat::ChromeTraceEvent);
    }

    #[test]
    fn detects_native_header() {
        let f = b"{\"schema\":\"opchar/v1\"}\n";
        assert_eq!(detect_format(f).unwrap(), TraceFormat::NativeJsonl);
    }

    #[test]
    fn detects_ort_profile() {
        let f = br#"[
            {"cat":"Session","pid":1,"tid":1,"dur":900,"ts":0,"ph":"X","name":"model_run","args":{}},
            {"cat":"Node","pid":1,"tid":1,"dur":120,"ts":10,"ph":"X","name":"r_kernel_time","args":{"op_name":"Reshape","provider":"CPUExecutionProvider"}},
            {"cat":"Node","pid":1,"tid":1,"dur":300,"ts":200,"ph":"X","name":"m_kernel_time","args":{"op_name":"MatMul","provider":"CUDAExecutionProvider"}}
        ]"#;
        assert_eq!(detect_format(f).unwrap(), TraceFormat::OrtProfile);
    }

    #[test]
    fn rejects_garbage_with_excerpt() {
        match detect_format(b"hello world, not a trace") {
            Err(IngestError::UnrecognizedFormat { excerpt }) => assert!(excerpt.starts_with("hello")),
            other => panic!("{other:?}"),
        }
        assert!(detect_format(b"   ").is_err());
        assert!(detect_format(br#"{"foo":1}"#).is_err());
        assert!(detect_format(br#"[1,2,3]"#).is_err());
    }

    #[test]
    fn sidecar_meta_keys() {
        let v: Value = serde_json::json!({"model_name":"toy","batch":2,"seq_len":"128","precision":"fp16"});
        let m = meta_from_json(&v);
        assert_eq!(m.model.as_deref(), Some("toy"));
        assert_eq!(m.batch_size, Some(2));
        assert_eq!(m.seq_len, Some(128));
        assert_eq!(sidecar_path(Path::new("a/t.json")), PathBuf::from("a/t.json.meta.json"));
    }

    #[test]
    fn interner_is_stable() {
        let mut t = TrackInterner::default();
        let a = t.id(Some(&Value::from("Spans")));
        let b = t.id(Some(&Value::from("other")));
        assert_eq!(t.id(Some(&Value::from("Spans"))), a);
        assert_ne!(a, b);
        assert_eq!(t.id(Some(&Value::from("42"))), 42);
        assert_eq!(t.id(Some(&Value::from(7))), 7);
    }
}
