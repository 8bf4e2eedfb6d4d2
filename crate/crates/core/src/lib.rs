//! Operator-level characterization of ML inference profiles.
//!
//! Traces from the PyTorch profiler (Chrome trace JSON), ONNX Runtime
//! profiling, or the native `opchar/v1` JSONL format are normalized into a
//! [`Trace`], classified into GEMM and non-GEMM operator groups, and
//! aggregated into latency breakdowns, fusion and quantization diffs, and
//! generation-phase metrics. [`memmodel`] answers the complementary
//! analytical question of how long a context fits in device memory.

pub mod trace_model;
pub mod breakdown;
pub mod cli;
pub mod diff_fusion;
pub mod diff_quant;
pub mod ingest;
pub mod memmodel;
pub mod report;
pub mod synth;
pub mod taxonomy;

pub use taxonomy::{OperatorGroup, Ruleset};
pub use trace_model::{EventKind, OperatorEvent, Trace, TraceMeta, Track};
