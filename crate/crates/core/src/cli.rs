//! Command-line front end. `run` is the whole program minus process exit,
//! so tests can drive it in-process.

use std::ffi::OsString;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use regex::Regex;

use crate::breakdown::{compute_phase_metrics, Analysis, AttributionView, PhaseRules};
use crate::diff_fusion::{fusion_rate, CountBasis, FusionOptions, DEFAULT_DELIMITERS};
use crate::diff_quant::{quant_diff, seq_scaling_series};
use crate::ingest::{export_native, parse_bytes, read_sidecar_meta, sidecar_path, TraceFormat};
use crate::memmodel::{compare_architectures, footprint, max_seq_len, parse_bytes as parse_byte_count, ModelMemConfig};
use crate::report::{emit, Format, MemRow, MemoryReport, Report, SeriesReport};
use crate::synth::{generate, SynthSpec};
use crate::taxonomy::{load_rules, parse_rules, OperatorGroup, Ruleset};
use crate::trace_model::Trace;

#[derive(Parser, Debug)]
#[command(name = "opchar", version, about = "Operator-level characterization of ML inference traces")]
struct Cli {
    /// Worker threads for multi-trace commands (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Print ingest accounting to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct RulesArg {
    /// Extra classification rules, merged over the builtin set.
    #[arg(long, env = "OPCHAR_RULES")]
    rules: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InputFormat {
    /// Input trace format.
    #[arg(long, default_value = "auto")]
    format: String,
}

#[derive(Args, Debug)]
struct Output {
    /// Output format: csv, json, md, svg or plotdata.
    #[arg(long, default_value = "md")]
    emit: String,
    /// Output file or directory ("-" for stdout).
    #[arg(short, long, default_value = "-")]
    output: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a profiler trace and write the native JSONL form.
    Ingest {
        file: String,
        #[command(flatten)]
        format: InputFormat,
        /// Metadata JSON; defaults to `<file>.meta.json` when present.
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(short, long, default_value = "-")]
        output: String,
    },
    /// Per-group latency breakdown of one or more traces.
    Breakdown {
        #[arg(required = true)]
        traces: Vec<String>,
        #[command(flatten)]
        rules: RulesArg,
        #[command(flatten)]
        format: InputFormat,
        /// Attribution view(s): cpu, gpu, combined. Comma-separated for several bars per trace.
        #[arg(long, default_value = "combined", value_delimiter = ',')]
        view: Vec<String>,
        /// Rows in the expensive non-GEMM operator table.
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        /// Add TTFT/TPOT/throughput from phase markers.
        #[arg(long)]
        phases: bool,
        /// Regex for prefill markers [default: ^(prefill|prompt), case-insensitive].
        #[arg(long)]
        prefill_pattern: Option<String>,
        /// Regex for decode-token markers [default: ^(decode|token|generate_token), case-insensitive].
        #[arg(long)]
        decode_pattern: Option<String>,
        #[command(flatten)]
        out: Output,
    },
    /// Fusion rate and speedups between a baseline and a fused trace.
    DiffFusion {
        baseline: String,
        fused: String,
        #[command(flatten)]
        rules: RulesArg,
        #[command(flatten)]
        format: InputFormat,
        /// Count fused operators by `instances` or distinct `types`.
        #[arg(long, default_value = "instances")]
        count_basis: String,
        /// Fused-name delimiters, comma-separated.
        #[arg(long)]
        delims: Option<String>,
        /// Attribution view used for latencies: cpu, gpu, combined.
        #[arg(long, default_value = "combined")]
        view: String,
        /// Compare traces even when their model names differ.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        out: Output,
    },
    /// Quantization overhead between a baseline and a quantized trace.
    DiffQuant {
        baseline: String,
        quantized: String,
        #[command(flatten)]
        rules: RulesArg,
        #[command(flatten)]
        format: InputFormat,
        /// Compare traces even when their model names differ.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        out: Output,
    },
    /// Share of one group across sequence lengths; inputs are `trace@S`.
    SeqSeries {
        #[arg(required = true)]
        points: Vec<String>,
        /// Operator group to track.
        #[arg(long, default_value = "elementwise")]
        group: String,
        #[command(flatten)]
        rules: RulesArg,
        #[command(flatten)]
        format: InputFormat,
        #[command(flatten)]
        out: Output,
    },
    /// Analytical memory footprint and maximum sequence length.
    Memmodel {
        /// Model memory config (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        batch: u64,
        /// Sequence length for a footprint breakdown.
        #[arg(long)]
        seq: Option<u64>,
        /// Device memory budget, e.g. 24e9, 24GB, 80GiB.
        #[arg(long)]
        budget: Option<String>,
        /// Additional configs to rank against.
        #[arg(long, num_args = 1..)]
        compare: Vec<PathBuf>,
        /// Inline override `field=value`, applied to every config.
        #[arg(long = "set")]
        overrides: Vec<String>,
        /// Output format; plain text lines when omitted.
        #[arg(long)]
        emit: Option<String>,
        #[arg(short, long, default_value = "-")]
        output: String,
    },
    /// Generate a synthetic trace from a synth spec.
    Synth {
        /// Synth spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Overrides the seed in the synth file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(short, long, default_value = "-")]
        output: String,
        /// Where to write the variant counterpart trace.
        #[arg(long)]
        fused_out: Option<PathBuf>,
    },
    /// Validate or print classification rules.
    Rules {
        #[command(subcommand)]
        cmd: RulesCmd,
    },
}

#[derive(Subcommand, Debug)]
enum RulesCmd {
    /// Parse a rules file and report problems.
    Check { file: PathBuf },
    /// Print the builtin rules in rules-file syntax.
    Dump,
}

struct Io<'a> {
    stdin: &'a mut dyn Read,
    stdout: &'a mut dyn Write,
    stderr: &'a mut dyn Write,
    verbose: bool,
}

impl Io<'_> {
    fn read_input(&mut self, path: &str) -> Result<Vec<u8>> {
        if path == "-" {
            let mut buf = Vec::new();
            self.stdin.read_to_end(&mut buf).context("reading stdin")?;
            Ok(buf)
        } else {
            fs::read(path).with_context(|| format!("reading {path}"))
        }
    }

    fn write_output(&mut self, target: &str, default_name: &str, bytes: &[u8]) -> Result<()> {
        if target == "-" {
            self.stdout.write_all(bytes)?;
            return Ok(());
        }
        let mut path = PathBuf::from(target);
        if target.ends_with('/') || path.is_dir() {
            fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
            path.push(default_name);
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
    }

    fn warn(&mut self, msg: impl AsRef<str>) {
        let _ = writeln!(self.stderr, "warning: {}", msg.as_ref());
    }
}

fn input_format(s: &str) -> Result<Option<TraceFormat>> {
    if s == "auto" {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|e: String| anyhow!(e))
    }
}

fn ruleset(arg: &RulesArg) -> Result<Ruleset> {
    match &arg.rules {
        Some(p) => load_rules(p).with_context(|| format!("loading rules {}", p.display())),
        None => Ok(Ruleset::builtin()),
    }
}

/// Parses bytes into a trace, merging sidecar metadata for file inputs.
fn load_trace(path: &str, bytes: &[u8], format: Option<TraceFormat>) -> Result<(Trace, Vec<String>)> {
    let parsed = parse_bytes(bytes, format).with_context(|| format!("parsing {path}"))?;
    let mut trace = parsed.trace;
    let mut notes: Vec<String> = parsed.report.warnings.iter().map(|w| format!("{path}: {w}")).collect();
    if path != "-" {
        let side = sidecar_path(Path::new(path));
        if side.is_file() {
            let meta = read_sidecar_meta(&side).with_context(|| format!("reading {}", side.display()))?;
            trace.meta.merge_missing(&meta);
        }
    }
    let r = &parsed.report;
    if !r.skipped.is_empty() {
        let parts: Vec<String> = r.skipped.iter().map(|(k, v)| format!("{k}: {v}")).collect();
        notes.push(format!("{path}: {} records, {} converted, skipped {{{}}}", r.records, r.converted, parts.join(", ")));
    }
    Ok((trace, notes))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| anyhow!(e))
}

/// Reads all inputs (stdin at most once) then parses them in parallel,
/// keeping argument order.
fn load_traces(io: &mut Io<'_>, paths: &[String], format: Option<TraceFormat>, jobs: usize) -> Result<Vec<Trace>> {
    if paths.iter().filter(|p| *p == "-").count() > 1 {
        bail!("stdin ('-') can be used for one input only");
    }
    let raw = paths.iter().map(|p| io.read_input(p)).collect::<Result<Vec<_>>>()?;
    let loaded = pool(jobs)?.install(|| {
        paths.par_iter().zip(raw.par_iter()).map(|(p, b)| load_trace(p, b, format)).collect::<Vec<_>>()
    });
    let mut traces = Vec::with_capacity(loaded.len());
    for item in loaded {
        let (t, notes) = item?;
        for n in notes {
            if io.verbose || !n.contains(" records, ") {
                io.warn(n);
            }
        }
        traces.push(t);
    }
    Ok(traces)
}

fn file_label(path: &str) -> String {
    if path == "-" {
        return "stdin".into();
    }
    Path::new(path).file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.to_string())
}

fn parse_format(s: &str) -> Result<Format> {
    Ok(s.parse::<Format>()?)
}

fn apply_overrides(value: &mut serde_json::Value, overrides: &[String]) -> Result<()> {
    let obj = value.as_object_mut().ok_or_else(|| anyhow!("config must be a JSON object"))?;
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| anyhow!("override '{o}' must look like field=value"))?;
        let parsed = serde_json::from_str(v.trim()).unwrap_or_else(|_| serde_json::Value::String(v.trim().to_string()));
        obj.insert(k.trim().to_string(), parsed);
    }
    Ok(())
}

fn load_config(path: &Path, overrides: &[String]) -> Result<ModelMemConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    apply_overrides(&mut v, overrides)?;
    let mut cfg: ModelMemConfig = serde_json::from_value(v).with_context(|| format!("invalid config {}", path.display()))?;
    if cfg.label.is_none() {
        cfg.label = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli, io: &mut Io<'_>) -> Result<()> {
    let jobs = cli.jobs;
    match cli.cmd {
        Command::Ingest { file, format, meta, output } => {
            let bytes = io.read_input(&file)?;
            let parsed = parse_bytes(&bytes, input_format(&format.format)?).with_context(|| format!("parsing {file}"))?;
            let mut trace = parsed.trace;
            let side = meta.or_else(|| (file != "-").then(|| sidecar_path(Path::new(&file))).filter(|p| p.is_file()));
            if let Some(side) = side {
                let m = read_sidecar_meta(&side).with_context(|| format!("reading {}", side.display()))?;
                trace.meta.merge_missing(&m);
            }
            for w in &parsed.report.warnings {
                io.warn(w);
            }
            let r = &parsed.report;
            let _ = writeln!(
                io.stderr,
                "{}: {} records, {} converted, {} skipped{}",
                file_label(&file),
                r.records,
                r.converted,
                r.skipped_total(),
                if r.skipped.is_empty() {
                    String::new()
                } else {
                    format!(" ({})", r.skipped.iter().map(|(k, v)| format!("{k}: {v}")).collect::<Vec<_>>().join(", "))
                }
            );
            io.write_output(&output, "trace.jsonl", &export_native(&trace))
        }
        Command::Breakdown { traces, rules, format, view, top_k, phases, prefill_pattern, decode_pattern, out } => {
            let rs = ruleset(&rules)?;
            let views = view.iter().map(|v| v.parse::<AttributionView>().map_err(|e| anyhow!(e))).collect::<Result<Vec<_>>>()?;
            let fmt = parse_format(&out.emit)?;
            let mut phase_rules = PhaseRules::default();
            if let Some(p) = prefill_pattern {
                phase_rules.prefill = Regex::new(&p).context("invalid --prefill-pattern")?;
            }
            if let Some(p) = decode_pattern {
                phase_rules.decode = Regex::new(&p).context("invalid --decode-pattern")?;
            }
            let loaded = load_traces(io, &traces, input_format(&format.format)?, jobs)?;
            let results = pool(jobs)?.install(|| {
                loaded
                    .par_iter()
                    .zip(traces.par_iter())
                    .map(|(t, path)| -> Result<_> {
                        let a = Analysis::new(t, &rs).with_context(|| format!("analyzing {path}"))?;
                        let unknown = a.classes.unmatched_names(t);
                        let mut warns = Vec::new();
                        if !unknown.is_empty() {
                            let shown: Vec<&str> = unknown.iter().take(5).copied().collect();
                            let more = if unknown.len() > 5 { ", ..." } else { "" };
                            let s = if unknown.len() == 1 { "" } else { "s" };
                            warns.push(format!("{path}: {} operator name{s} matched no rule ({}{more})", unknown.len(), shown.join(", ")));
                        }
                        let pm = if phases { Some(compute_phase_metrics(t, &phase_rules)) } else { None };
                        let mut reps = Vec::new();
                        for v in &views {
                            let mut r = a.breakdown(*v, top_k)?;
                            let base = r.meta.model.clone().unwrap_or_else(|| file_label(path));
                            r.label = Some(if views.len() > 1 { format!("{base} {v}") } else { base });
                            if let Some(Ok(m)) = &pm {
                                r.phase_metrics = Some(m.clone());
                            }
                            reps.push(r);
                        }
                        warns.extend(pm.and_then(|p| p.err()).map(|e| format!("{path}: {e}")));
                        Ok((reps, warns))
                    })
                    .collect::<Vec<_>>()
            });
            let mut all = Vec::new();
            for r in results {
                let (reps, warns) = r?;
                for w in warns {
                    io.warn(w);
                }
                all.extend(reps);
            }
            for r in all.iter().filter(|r| r.exceeds_wall_clock() && r.view == AttributionView::Combined) {
                if io.verbose {
                    io.warn(format!("{}: combined CPU+GPU time exceeds wall clock", r.label.as_deref().unwrap_or("")));
                }
            }
            let bytes = emit(&Report::Breakdown(all), fmt)?;
            io.write_output(&out.output, &format!("breakdown.{}", fmt.extension()), &bytes)
        }
        Command::DiffFusion { baseline, fused, rules, format, count_basis, delims, view, force, out } => {
            let rs = ruleset(&rules)?;
            let fmt = parse_format(&out.emit)?;
            let opts = FusionOptions {
                basis: count_basis.parse::<CountBasis>().map_err(|e| anyhow!(e))?,
                view: view.parse().map_err(|e: String| anyhow!(e))?,
                force,
                delimiters: match delims {
                    Some(d) => d.split(',').map(str::to_string).filter(|s| !s.is_empty()).collect(),
                    None => DEFAULT_DELIMITERS.iter().map(|s| s.to_string()).collect(),
                },
                top_k: 5,
            };
            let ts = load_traces(io, &[baseline.clone(), fused.clone()], input_format(&format.format)?, jobs)?;
            let mut report = fusion_rate(&ts[0], &ts[1], &rs, &opts)?;
            report.before.label = Some(file_label(&baseline));
            report.after.label = Some(file_label(&fused));
            let bytes = emit(&Report::Fusion(Box::new(report)), fmt)?;
            io.write_output(&out.output, &format!("fusion.{}", fmt.extension()), &bytes)
        }
        Command::DiffQuant { baseline, quantized, rules, format, force, out } => {
            let rs = ruleset(&rules)?;
            let fmt = parse_format(&out.emit)?;
            let ts = load_traces(io, &[baseline.clone(), quantized.clone()], input_format(&format.format)?, jobs)?;
            let mut report = quant_diff(&ts[0], &ts[1], &rs, force)?;
            report.before.label = Some(file_label(&baseline));
            report.after.label = Some(file_label(&quantized));
            let bytes = emit(&Report::Quant(Box::new(report)), fmt)?;
            io.write_output(&out.output, &format!("quant.{}", fmt.extension()), &bytes)
        }
        Command::SeqSeries { points, group, rules, format, out } => {
            let rs = ruleset(&rules)?;
            let fmt = parse_format(&out.emit)?;
            let group: OperatorGroup = group.parse()?;
            let mut paths = Vec::new();
            let mut lens = Vec::new();
            for p in &points {
                let (path, s) = p.rsplit_once('@').ok_or_else(|| anyhow!("'{p}' must look like trace@SEQ_LEN"))?;
                lens.push(s.parse::<u64>().with_context(|| format!("bad sequence length in '{p}'"))?);
                paths.push(path.to_string());
            }
            let ts = load_traces(io, &paths, input_format(&format.format)?, jobs)?;
            let series = seq_scaling_series(&lens.into_iter().zip(ts).collect::<Vec<_>>(), &rs, group)?;
            let bytes = emit(&Report::Series(SeriesReport { group, points: series }), fmt)?;
            io.write_output(&out.output, &format!("series.{}", fmt.extension()), &bytes)
        }
        Command::Memmodel { config, batch, seq, budget, compare, overrides, emit: emit_fmt, output } => {
            if seq.is_none() && budget.is_none() {
                bail!("give --seq, --budget, or both");
            }
            let budget = budget.map(|b| parse_byte_count(&b).map_err(|e| anyhow!(e))).transpose()?;
            let mut cfgs = vec![load_config(&config, &overrides)?];
            for c in &compare {
                cfgs.push(load_config(c, &overrides)?);
            }
            let ranking = match budget {
                Some(b) => Some(compare_architectures(&cfgs, batch, b)?),
                None => None,
            };
            let mut rows = Vec::new();
            for cfg in &cfgs {
                let label = cfg.display_label();
                let rank = ranking.as_ref().and_then(|r| r.iter().find(|x| x.label == label));
                rows.push(MemRow {
                    label,
                    arch: cfg.arch(),
                    batch,
                    seq_len: seq,
                    footprint: seq.map(|s| footprint(cfg, batch, s)).transpose()?,
                    limit: match budget {
                        Some(b) => Some(max_seq_len(cfg, batch, b)?),
                        None => None,
                    },
                    ratio_vs_transformer: rank.and_then(|r| r.ratio_vs_transformer),
                });
            }
            if budget.is_some() {
                rows.sort_by(|a, b| {
                    let (sa, sb) = (a.limit.map(|l| l.s_max), b.limit.map(|l| l.s_max));
                    sb.cmp(&sa).then_with(|| a.label.cmp(&b.label))
                });
            }
            let report = MemoryReport { budget_bytes: budget, rows };
            let bytes = match emit_fmt {
                Some(f) => emit(&Report::Memory(report), parse_format(&f)?)?,
                None => memmodel_text(&report).into_bytes(),
            };
            io.write_output(&output, "memmodel.txt", &bytes)
        }
        Command::Synth { spec, seed, output, fused_out } => {
            let text = fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let mut s: SynthSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", spec.display()))?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let out = generate(&s)?;
            io.write_output(&output, "trace.jsonl", &export_native(&out.trace))?;
            match (fused_out, out.counterpart) {
                (Some(p), Some(c)) => fs::write(&p, export_native(&c)).with_context(|| format!("writing {}", p.display())),
                (Some(_), None) => bail!("--fused-out given but the synth file has no variant"),
                (None, Some(_)) => {
                    io.warn("synth spec has a variant; pass --fused-out to write it");
                    Ok(())
                }
                (None, None) => Ok(()),
            }
        }
        Command::Rules { cmd: RulesCmd::Check { file } } => {
            let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            let rules = parse_rules(&text, &file.display().to_string())?;
            let n = rules.len();
            Ruleset::builtin().merged_with(rules)?;
            let _ = writeln!(io.stdout, "ok: {n} rules");
            Ok(())
        }
        Command::Rules { cmd: RulesCmd::Dump } => {
            io.stdout.write_all(Ruleset::builtin().dump().as_bytes())?;
            Ok(())
        }
    }
}

fn memmodel_text(r: &MemoryReport) -> String {
    let mut s = String::new();
    for row in &r.rows {
        if let Some(f) = &row.footprint {
            s.push_str(&format!(
                "{}: B={} S={} weights={} kv={} activations={} ssm_state={} overhead={} total={} bytes ({:.3} GB)\n",
                row.label,
                row.batch,
                row.seq_len.unwrap_or(0),
                f.weights_bytes,
                f.kv_cache_bytes,
                f.activation_bytes,
                f.ssm_state_bytes,
                f.overhead_bytes,
                f.total_bytes,
                crate::memmodel::decimal_gb(f.total_bytes)
            ));
        }
        if let (Some(l), Some(b)) = (&row.limit, r.budget_bytes) {
            let flag = match l.flag {
                Some(f) => format!(" [{}]", serde_json::to_value(f).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()),
                None => String::new(),
            };
            let ratio = row.ratio_vs_transformer.map(|x| format!(" ratio={x:.3}")).unwrap_or_default();
            s.push_str(&format!("{}: S_max={} (B={} budget={} bytes){flag}{ratio}\n", row.label, l.s_max, row.batch, b));
        }
    }
    s
}

/// Runs the CLI and returns the process exit code: 0 on success, 2 on any
/// input or usage error.
pub fn run<I, T>(args: I, stdin: &mut dyn Read, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 { stdout.write_all(text.as_bytes()) } else { stderr.write_all(text.as_bytes()) };
            return if code == 0 { 0 } else { 2 };
        }
    };
    let verbose = cli.verbose;
    let mut io = Io { stdin, stdout, stderr, verbose };
    match execute(cli, &mut io) {
        Ok(()) => match io.stdout.flush() {
            Ok(()) => 0,
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => 0,
            Err(e) => {
                let _ = writeln!(io.stderr, "error: {e}");
                2
            }
        },
        Err(e) => {
            let _ = writeln!(io.stderr, "error: {e:#}");
            2
        }
    }
}
