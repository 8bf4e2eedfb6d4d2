//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use opchar::ingest::{parse_bytes, read_sidecar_meta, sidecar_path, Parsed};
use opchar::memmodel::ModelMemConfig;
use opchar::synth::{generate, GroupTarget, SynthSpec};
use opchar::{EventKind, OperatorEvent, OperatorGroup, Trace};
use rand::Rng;

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

pub fn fixtures_in(dir: &str, ext: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(fixture(dir))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with(ext) && !p.to_string_lossy().ends_with(".meta.json"))
        .collect();
    v.sort();
    v
}

/// Parses a trace file and merges its sidecar metadata, as the CLI does.
pub fn load(path: &Path) -> Parsed {
    let bytes = std::fs::read(path).unwrap();
    let mut p = parse_bytes(&bytes, None).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let side = sidecar_path(path);
    if side.is_file() {
        p.trace.meta.merge_missing(&read_sidecar_meta(&side).unwrap());
    }
    p
}

pub fn synth_spec(name: &str) -> SynthSpec {
    let text = std::fs::read_to_string(fixture(&format!("synth/{name}"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// Baseline and counterpart traces for a synth fixture.
pub fn synth_pair(name: &str) -> (Trace, Trace) {
    let out = generate(&synth_spec(name)).unwrap();
    (out.trace, out.counterpart.expect("fixture has a variant"))
}

pub fn mem_config(name: &str) -> ModelMemConfig {
    let text = std::fs::read_to_string(fixture(&format!("memmodel/{name}"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

pub fn opchar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_opchar")).args(args).env_remove("OPCHAR_RULES").output().unwrap()
}

pub fn opchar_stdin(args: &[&str], stdin: &[u8]) -> Output {
    use std::io::Write;
    use std::process::Stdio;
    let mut child = Command::new(env!("CARGO_BIN_EXE_opchar"))
        .args(args)
        .env_remove("OPCHAR_RULES")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(stdin).unwrap();
    child.wait_with_output().unwrap()
}

/// Random forest of properly nested CpuOps on one track. Returns the trace
/// and the durations of its roots.
pub fn random_nested_trace(rng: &mut impl Rng, max_nodes: usize) -> (Trace, Vec<u64>) {
    struct Gen<'r, R: Rng> {
        rng: &'r mut R,
        events: Vec<OperatorEvent>,
        budget: usize,
    }
    impl<R: Rng> Gen<'_, R> {
        fn node(&mut self, start: u64, dur: u64, parent: Option<u64>, depth: u32) {
            let id = self.events.len() as u64 + 1;
            let mut ev = OperatorEvent::new(id, format!("aten::op{}", self.rng.gen_range(0..5)), EventKind::CpuOp, start, dur).on_track(1, 1);
            if let Some(p) = parent {
                ev = ev.with_parent(p);
            }
            self.events.push(ev);
            if depth >= 6 || dur < 2 {
                return;
            }
            // Carve disjoint child intervals out of [start, start + dur].
            let mut t = start;
            let end = start + dur;
            while self.budget > 0 && t < end && self.rng.gen_bool(0.6) {
                let gap = self.rng.gen_range(0..=(end - t) / 4);
                let s = t + gap;
                if s >= end {
                    break;
                }
                let d = self.rng.gen_range(0..=(end - s));
                self.budget -= 1;
                self.node(s, d, Some(id), depth + 1);
                t = s + d;
            }
        }
    }
    let mut g = Gen { rng, events: Vec::new(), budget: max_nodes };
    let mut roots = Vec::new();
    let mut t = 0;
    let n_roots = g.rng.gen_range(1..=4);
    for _ in 0..n_roots {
        t += g.rng.gen_range(0..50);
        let d = g.rng.gen_range(0..5000);
        roots.push(d);
        g.node(t, d, None, 0);
        t += d;
    }
    (Trace::new(g.events), roots)
}

/// Random feasible spec: every group present gets at least one op, kernels
/// only for groups that also have CpuOps to launch from.
pub fn random_synth_spec(rng: &mut impl Rng, seed: u64) -> SynthSpec {
    let mut spec = SynthSpec::new(seed);
    spec.nesting_depth = rng.gen_range(1..=5);
    for g in OperatorGroup::ALL {
        if g == OperatorGroup::SsmSpecific && rng.gen_bool(0.5) || rng.gen_bool(0.3) {
            continue;
        }
        let count = rng.gen_range(1..=60);
        let total = rng.gen_range(0..=count * 900);
        spec.groups.insert(g, GroupTarget::new(total, count));
    }
    if spec.groups.is_empty() {
        spec.groups.insert(OperatorGroup::Gemm, GroupTarget::new(100, 3));
    }
    let present: Vec<OperatorGroup> = spec.groups.keys().copied().collect();
    for g in present {
        if rng.gen_bool(0.4) {
            let count = rng.gen_range(1..=30);
            spec.gpu_groups.insert(g, GroupTarget::new(rng.gen_range(count..=count * 2000), count));
        }
    }
    spec
}

/// Independent S_max: grow by doubling, then bisect on the summed
/// footprint terms computed here from the config fields.
pub fn brute_force_s_max(cfg: &ModelMemConfig, batch: u64, budget: u128) -> Option<u64> {
    let kv_dim = match (cfg.n_kv_heads, cfg.head_dim) {
        (Some(h), Some(d)) => h as u128 * d as u128,
        _ => cfg.hidden_dim as u128,
    };
    let p = cfg.p_bytes as u128;
    let b = batch as u128;
    let total = |s: u64| -> u128 {
        let s = s as u128;
        cfg.n_params as u128 * p
            + b * s * cfg.n_layers_attention as u128 * kv_dim * 2 * p
            + b * s * cfg.hidden_dim as u128 * cfg.activation_factor_c as u128 * p
            + cfg.n_layers_total as u128 * cfg.ssm_state_bytes_per_layer as u128
            + cfg.overhead_bytes as u128
    };
    let cap = opchar::memmodel::SEQ_CAP;
    if total(0) > budget {
        return None;
    }
    let mut hi = 1u64;
    while hi < cap && total(hi) <= budget {
        hi = (hi * 2).min(cap);
    }
    if total(hi) <= budget {
        return Some(hi);
    }
    let mut lo = hi / 2;
    while lo + 1 < hi {
        let mid = lo + (hi - lo) / 2;
        if total(mid) <= budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(lo)
}

/// One shared list of CLI invocations for the determinism checks. Paths are
/// resolved against the fixture directory and a scratch directory holding
/// pre-generated synth traces.
pub fn cli_matrix(scratch: &Path) -> Vec<Vec<String>> {
    let f = |s: &str| fixture(s).display().to_string();
    let s = |n: &str| scratch.join(n).display().to_string();
    vec![
        vec!["breakdown".into(), f("chrome/transformer.json"), f("chrome/cnn_detector.json"), f("chrome/ssm.json"), f("chrome/gpu_decoder.json"), f("ort/encoder_cpu.json"), "--view".into(), "cpu,gpu,combined".into(), "--emit".into(), "json".into()],
        vec!["breakdown".into(), f("chrome/transformer.json"), f("chrome/cnn_detector.json"), f("chrome/gpu_decoder.json"), "--emit".into(), "csv".into()],
        vec!["breakdown".into(), f("chrome/transformer.json"), f("ort/bert_cuda.json"), "--emit".into(), "svg".into()],
        vec!["breakdown".into(), f("chrome/toy_generate.json"), "--phases".into(), "--emit".into(), "md".into()],
        vec!["breakdown".into(), s("toy.jsonl"), "--phases".into(), "--emit".into(), "plotdata".into()],
        vec!["diff-fusion".into(), s("detr.base.jsonl"), s("detr.fused.jsonl"), "--emit".into(), "md".into()],
        vec!["diff-fusion".into(), s("detr.base.jsonl"), s("detr.fused.jsonl"), "--count-basis".into(), "types".into(), "--emit".into(), "json".into()],
        vec!["diff-quant".into(), s("quant.base.jsonl"), s("quant.q.jsonl"), "--emit".into(), "csv".into()],
        vec!["seq-series".into(), format!("{}@128", s("quant.base.jsonl")), format!("{}@256", s("quant.q.jsonl")), "--group".into(), "elementwise".into(), "--emit".into(), "csv".into()],
        vec!["memmodel".into(), "--config".into(), f("memmodel/qwen_like.json"), "--budget".into(), "24e9".into(), "--compare".into(), f("memmodel/mamba_like.json"), f("memmodel/llama_like.json")],
        vec!["memmodel".into(), "--config".into(), f("memmodel/llama_like.json"), "--seq".into(), "4096".into(), "--budget".into(), "80GB".into(), "--emit".into(), "json".into()],
        vec!["synth".into(), "--spec".into(), f("synth/toy_decoder.json"), "--seed".into(), "9".into()],
        vec!["ingest".into(), f("chrome/gpu_decoder.json")],
        vec!["ingest".into(), f("ort/bert_cuda.json")],
        vec!["rules".into(), "dump".into()],
    ]
}

/// Writes the synth traces `cli_matrix` refers to.
pub fn prepare_scratch(scratch: &Path) {
    let write = |name: &str, t: &Trace| std::fs::write(scratch.join(name), opchar::ingest::export_native(t)).unwrap();
    let toy = generate(&synth_spec("toy_decoder.json")).unwrap();
    write("toy.jsonl", &toy.trace);
    let (b, f) = synth_pair("detr.json");
    write("detr.base.jsonl", &b);
    write("detr.fused.jsonl", &f);
    let mut q = SynthSpec::new(5)
        .group(OperatorGroup::Gemm, 5000, 20)
        .group(OperatorGroup::ElementwiseArithmetic, 1000, 30)
        .group(OperatorGroup::Memory, 800, 25);
    q.variant = Some(opchar::synth::VariantPlan {
        add: [("aten::quantize_per_tensor".to_string(), 20), ("aten::dequantize".to_string(), 20)].into_iter().collect(),
        latency_scale: [(OperatorGroup::Gemm, 0.6), (OperatorGroup::ElementwiseArithmetic, 3.0)].into_iter().collect(),
        ..Default::default()
    });
    let out = generate(&q).unwrap();
    write("quant.base.jsonl", &out.trace);
    write("quant.q.jsonl", &out.counterpart.unwrap());
}
