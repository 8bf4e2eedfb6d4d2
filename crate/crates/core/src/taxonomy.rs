//! Operator taxonomy: GEMM versus the non-GEMM groups.
//!
//! Classification is an ordered list of regex rules; the rule with the lowest
//! priority number that matches an event name wins, and anything unmatched is
//! [`OperatorGroup::Uncategorized`]. GPU kernels whose own names match nothing
//! inherit the group of the CPU op that launched them.
//!
//! # Rules file grammar
//!
//! One rule per line, `#` starts a comment:
//!
//! ```text
//! # group[:tag]          priority   pattern
//! Activation             5          ^aten::gelu$
//! ElementwiseArithmetic:dqrq  -     (?i)my_dequant
//! ```
//!
//! `priority` is an integer or `-` for automatic. Automatic priorities follow
//! line order and always win over the builtin rules. The pattern is the rest
//! of the line after the priority column, trimmed. A JSON array of
//! `{"pattern", "group", "priority"?, "tag"?}` objects is accepted as well.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace_model::{EventKind, EventTree, Trace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum OperatorGroup {
    Gemm,
    Normalization,
    Activation,
    Memory,
    ElementwiseArithmetic,
    RoiSelection,
    LogitComputation,
    SsmSpecific,
    Uncategorized,
}

impl OperatorGroup {
    pub const ALL: [OperatorGroup; 9] = [
        OperatorGroup::Gemm,
        OperatorGroup::Normalization,
        OperatorGroup::Activation,
        OperatorGroup::Memory,
        OperatorGroup::ElementwiseArithmetic,
        OperatorGroup::RoiSelection,
        OperatorGroup::LogitComputation,
        OperatorGroup::SsmSpecific,
        OperatorGroup::Uncategorized,
    ];

    pub fn is_gemm(self) -> bool {
        self == OperatorGroup::Gemm
    }

    pub fn is_non_gemm(self) -> bool {
        !self.is_gemm()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OperatorGroup::Gemm => "Gemm",
            OperatorGroup::Normalization => "Normalization",
            OperatorGroup::Activation => "Activation",
            OperatorGroup::Memory => "Memory",
            OperatorGroup::ElementwiseArithmetic => "ElementwiseArithmetic",
            OperatorGroup::RoiSelection => "RoiSelection",
            OperatorGroup::LogitComputation => "LogitComputation",
            OperatorGroup::SsmSpecific => "SsmSpecific",
            OperatorGroup::Uncategorized => "Uncategorized",
        }
    }

    /// Operator names known to classify into this group under the builtin
    /// rules. Used as name pools by the synthetic generator.
    pub fn exemplars(self) -> &'static [&'static str] {
        match self {
            OperatorGroup::Gemm => &["aten::linear", "aten::addmm", "aten::conv2d", "aten::bmm", "aten::matmul"],
            OperatorGroup::Normalization => &["aten::layer_norm", "aten::batch_norm", "aten::group_norm", "aten::rms_norm"],
            OperatorGroup::Activation => &["aten::relu", "aten::gelu", "aten::silu", "aten::sigmoid", "aten::tanh"],
            OperatorGroup::Memory => &[
                "aten::reshape",
                "aten::transpose",
                "aten::permute",
                "aten::cat",
                "aten::contiguous",
                "aten::copy_",
                "aten::view",
            ],
            OperatorGroup::ElementwiseArithmetic => &["aten::add", "aten::mul", "aten::div", "aten::sub", "aten::pow"],
            OperatorGroup::RoiSelection => &["torchvision::nms", "torchvision::roi_align", "torchvision::roi_pool"],
            OperatorGroup::LogitComputation => &["aten::softmax", "aten::log_softmax"],
            OperatorGroup::SsmSpecific => &["mamba_inner_fn", "selective_scan_fn", "causal_conv1d_fn"],
            OperatorGroup::Uncategorized => &["custom::opaque_op"],
        }
    }

    /// GPU kernel spellings for the group, where kernels have a recognizable
    /// name. Groups without one return an empty slice.
    pub fn kernel_exemplars(self) -> &'static [&'static str] {
        match self {
            OperatorGroup::Gemm => &["volta_sgemm_128x64_nn", "ampere_fp16_s16816gemm_fp16_128x128_ldg8_f2f_nn"],
            OperatorGroup::Normalization => &["layer_norm_kernel"],
            OperatorGroup::LogitComputation => &["softmax_warp_forward"],
            OperatorGroup::Memory => &["Memcpy DtoD (Device -> Device)", "CatArrayBatchedCopy"],
            _ => &[],
        }
    }
}

impl fmt::Display for OperatorGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown operator group '{0}'")]
pub struct UnknownGroup(pub String);

impl FromStr for OperatorGroup {
    type Err = UnknownGroup;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Ok(match key.as_str() {
            "gemm" => OperatorGroup::Gemm,
            "normalization" | "norm" => OperatorGroup::Normalization,
            "activation" | "act" => OperatorGroup::Activation,
            "memory" | "mem" => OperatorGroup::Memory,
            "elementwisearithmetic" | "elementwise" | "arithmetic" | "elmtwise" => OperatorGroup::ElementwiseArithmetic,
            "roiselection" | "roi" => OperatorGroup::RoiSelection,
            "logitcomputation" | "logit" | "logits" => OperatorGroup::LogitComputation,
            "ssmspecific" | "ssm" => OperatorGroup::SsmSpecific,
            "uncategorized" | "other" => OperatorGroup::Uncategorized,
            _ => return Err(UnknownGroup(s.to_string())),
        })
    }
}

impl<'de> Deserialize<'de> for OperatorGroup {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RuleSource {
    Builtin,
    File(String),
}

impl fmt::Display for RuleSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuleSource::Builtin => f.write_str("builtin"),
            RuleSource::File(p) => f.write_str(p),
        }
    }
}

/// Tag marking quantize/dequantize rules.
pub const TAG_DQRQ: &str = "dqrq";
/// Tag marking host-device synchronization waits.
pub const TAG_SYNC: &str = "sync";

#[derive(Clone, Debug)]
pub struct ClassificationRule {
    pub pattern: Regex,
    pub group: OperatorGroup,
    pub priority: i64,
    pub source: RuleSource,
    pub tag: Option<String>,
}

impl ClassificationRule {
    pub fn new(pattern: &str, group: OperatorGroup, priority: i64) -> Result<Self, regex::Error> {
        Ok(Self { pattern: Regex::new(pattern)?, group, priority, source: RuleSource::Builtin, tag: None })
    }

    pub fn tagged(mut self, tag: &str) -> Self {
        self.tag = Some(tag.to_string());
        self
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.tag.as_deref() == Some(tag)
    }
}

#[derive(Debug, Error)]
pub enum RulesError {
    #[error("line {line}: bad pattern: {message}")]
    BadPattern { line: usize, message: String },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("duplicate priority {0}")]
    DuplicatePriority(i64),
    #[error("malformed JSON rules: {0}")]
    Json(#[from] serde_json::Error),
    #[error("reading rules: {0}")]
    Io(#[from] std::io::Error),
}

/// Result of classifying a name: the group and the index of the winning rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RuleMatch {
    pub group: OperatorGroup,
    pub rule: Option<usize>,
}

/// Ordered rules with the implicit `Uncategorized` fallback.
#[derive(Clone, Debug)]
pub struct Ruleset {
    rules: Vec<ClassificationRule>,
}

// Builtin priorities are spaced so hand-written files can interleave.
const BUILTIN_BASE: i64 = 10_000;
const BUILTIN_STEP: i64 = 10;

const BUILTIN_RULES: &[(OperatorGroup, Option<&str>, &str)] = &[
    (OperatorGroup::Uncategorized, Some(TAG_SYNC), r"(?i)(cuda(Stream|Device|Event)Synchronize|(^|[^a-z])synchronize($|[^a-z]))"),
    (
        OperatorGroup::SsmSpecific,
        None,
        r"(?i)(selective_?scan|causal_?conv1d|mamba_?inner_?fn|mamba_?split_?conv1d_?scan_?combined|mamba_?chunk_?scan|ssd_?(chunk_?scan|chunk_?state|state_?passing|combined))",
    ),
    (OperatorGroup::ElementwiseArithmetic, Some(TAG_DQRQ), r"(?i)(quantiz|dequant|requant|(^|[^a-z])quant($|[^a-z]))"),
    (
        OperatorGroup::Gemm,
        None,
        r"(?i)(linear|addmm|baddbmm|(^|[^a-z])bmm($|[^a-z])|(^|[^a-z])mm($|[^a-z])|matmul|einsum|gemm|gemv|cutlass|xmma|flash_(fwd|bwd|attn)|fmha|attention|transformer_(encoder|decoder)_(only_)?layer_fwd)",
    ),
    (OperatorGroup::Gemm, None, r"(?i)conv(olution|_?transpose(\dd)?|[123]d|integer)?($|[^a-z])"),
    (OperatorGroup::LogitComputation, None, r"(?i)(^|[^a-z])_?(log_?)?soft_?max"),
    (
        OperatorGroup::Normalization,
        None,
        r"(?i)(layer_?norm|batch_?norm|group_?norm|instance_?norm|rms_?norm|l2_?norm|normalization|(^|[^a-z])(bn|ln|gn)($|[^a-z])|bn_fw)",
    ),
    (
        OperatorGroup::Activation,
        None,
        r"(?i)(^|[^a-z])(relu6?|leaky_?relu|prelu|gelu|fast_?gelu|bias_?gelu|quick_?gelu|silu|swish|hard_?swish|hard_?sigmoid|mish|elu|selu|celu|softplus|sigmoid|tanh|glu|swiglu|hard_?tanh|clamp_min|clip)($|[^a-z])",
    ),
    (
        OperatorGroup::RoiSelection,
        None,
        r"(?i)((^|[^a-z])(nms|batched_nms)($|[^a-z])|nonmaxsuppression|non_max_suppression|roi_?align|roi_?pool|multiscale_?roi)",
    ),
    (OperatorGroup::Memory, None, r"(?i)::(t|to|numpy_t|mT|T)$"),
    (
        OperatorGroup::Memory,
        None,
        r"(?i)(^|[^a-z])(reshape|_reshape_alias|view|view_as|_unsafe_view|transpose|permute|cat|concat|stack|split|split_with_sizes|chunk|unbind|contiguous|copy|_to_copy|_copy_from|clone|expand|expand_as|slice|narrow|select|index_select|index|gather|gather_elements|gathernd|gatherelements|scatter|scatternd|squeeze|unsqueeze|flatten|unflatten|as_strided|empty|empty_like|empty_strided|zeros|zeros_like|ones|ones_like|full|full_like|new_empty|new_zeros|resize|detach|alias|lift_fresh|pad|constant_pad_nd|repeat|repeat_interleave|roll|flip|embedding|shape|identity|cast|tile|memcpy|memset|masked_select|resolve_conj|resolve_neg|unfold|im2col|col2im|pixel_shuffle|upsample_\w+|interpolate|depthtospace|spacetodepth|constantofshape|catarraybatchedcopy)($|[^a-z])",
    ),
    (
        OperatorGroup::ElementwiseArithmetic,
        None,
        r"(?i)(^|[^a-z])(add|sub|rsub|mul|div|pow|sqrt|rsqrt|exp|log|log2|log1p|neg|abs|erf|clamp|clamp_max|nonzero|where|fill|masked_fill|zero|sum|mean|max|min|argmax|argmin|amax|amin|topk|sort|cumsum|reciprocal|mod|fmod|remainder|round|floor|ceil|sign|eq|ne|lt|le|gt|ge|equal|less|greater|not|and|or|logical_\w+|bitwise_\w+|square|addcmul|addcdiv|lerp|rand|randn|randint|random|normal|uniform|bernoulli|arange|range|dropout|max_pool\w*|avg_pool\w*|adaptive_\w*pool\w*|maxpool|averagepool|globalaveragepool|reducemean|reducesum|reducemax|reducemin|biasadd|_transform_bias_rescale_qkv)($|[^a-z])",
    ),
];

impl Ruleset {
    /// Builds a ruleset from rules with unique priorities.
    pub fn from_rules(mut rules: Vec<ClassificationRule>) -> Result<Self, RulesError> {
        rules.sort_by_key(|r| r.priority);
        if let Some(w) = rules.windows(2).find(|w| w[0].priority == w[1].priority) {
            return Err(RulesError::DuplicatePriority(w[0].priority));
        }
        Ok(Self { rules })
    }

    pub fn builtin() -> Self {
        static BUILTIN: OnceLock<Ruleset> = OnceLock::new();
        BUILTIN.get_or_init(Self::compile_builtin).clone()
    }

    fn compile_builtin() -> Self {
        let rules = BUILTIN_RULES
            .iter()
            .enumerate()
            .map(|(i, (group, tag, pat))| {
                let mut r = ClassificationRule::new(pat, *group, BUILTIN_BASE + BUILTIN_STEP * i as i64)
                    .expect("builtin patterns are valid");
                r.tag = tag.map(str::to_string);
                r
            })
            .collect();
        Self { rules }
    }

    pub fn rules(&self) -> &[ClassificationRule] {
        &self.rules
    }

    pub fn rule(&self, index: usize) -> &ClassificationRule {
        &self.rules[index]
    }

    /// Adds rules on top of this ruleset. Priorities must stay unique.
    /// Adds `extra` on top of these rules. An extra rule at the priority of
    /// an existing one replaces it, so an edited `dump` loads back.
    pub fn merged_with(&self, extra: Vec<ClassificationRule>) -> Result<Self, RulesError> {
        let taken: BTreeSet<i64> = extra.iter().map(|r| r.priority).collect();
        let mut all: Vec<ClassificationRule> = self.rules.iter().filter(|r| !taken.contains(&r.priority)).cloned().collect();
        all.extend(extra);
        Self::from_rules(all)
    }

    pub fn match_name(&self, name: &str) -> RuleMatch {
        self.rules
            .iter()
            .position(|r| r.pattern.is_match(name))
            .map(|i| RuleMatch { group: self.rules[i].group, rule: Some(i) })
            .unwrap_or(RuleMatch { group: OperatorGroup::Uncategorized, rule: None })
    }

    pub fn classify_name(&self, name: &str) -> OperatorGroup {
        self.match_name(name).group
    }

    pub fn name_has_tag(&self, name: &str, tag: &str) -> bool {
        self.match_name(name).rule.is_some_and(|i| self.rules[i].has_tag(tag))
    }

    /// Renders the ruleset in the line grammar accepted by [`parse_rules`].
    pub fn dump(&self) -> String {
        let mut out = String::from("# group[:tag]\tpriority\tpattern\n");
        for r in &self.rules {
            let group = match &r.tag {
                Some(t) => format!("{}:{}", r.group, t),
                None => r.group.to_string(),
            };
            out.push_str(&format!("{group}\t{}\t{}\n", r.priority, r.pattern.as_str()));
        }
        out
    }
}

impl Default for Ruleset {
    fn default() -> Self {
        Self::builtin()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRule {
    pattern: String,
    group: String,
    #[serde(default)]
    priority: Option<i64>,
    #[serde(default)]
    tag: Option<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum JsonRules {
    Bare(Vec<JsonRule>),
    Wrapped { rules: Vec<JsonRule> },
}

/// Line, pattern, tag, priority, group.
type RawRule = (usize, String, Option<String>, Option<i64>, String);

/// Parses user rules from text. Rules without an explicit priority are
/// numbered from `i64::MIN / 2` upward in line order, so they stay ahead of
/// every builtin and explicit rule.
pub fn parse_rules(text: &str, source: &str) -> Result<Vec<ClassificationRule>, RulesError> {
    let trimmed = text.trim_start();
    let raw: Vec<RawRule> = if trimmed.starts_with('[') || trimmed.starts_with('{') {
        let parsed: JsonRules = serde_json::from_str(text)?;
        let list = match parsed {
            JsonRules::Bare(v) => v,
            JsonRules::Wrapped { rules } => rules,
        };
        list.into_iter()
            .enumerate()
            .map(|(i, r)| (i + 1, r.group, r.tag, r.priority, r.pattern))
            .collect()
    } else {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (group_col, rest) = split_column(line).ok_or_else(|| RulesError::Syntax {
                line: lineno,
                message: "expected '<group> <priority|-> <pattern>'".into(),
            })?;
            let (prio_col, pattern) = split_column(rest).ok_or_else(|| RulesError::Syntax {
                line: lineno,
                message: "missing pattern".into(),
            })?;
            let priority = match prio_col {
                "-" => None,
                p => Some(p.parse::<i64>().map_err(|_| RulesError::Syntax {
                    line: lineno,
                    message: format!("bad priority '{p}'"),
                })?),
            };
            let (group, tag) = match group_col.split_once(':') {
                Some((g, t)) => (g.to_string(), Some(t.to_string())),
                None => (group_col.to_string(), None),
            };
            out.push((lineno, group, tag, priority, pattern.to_string()));
        }
        out
    };

    let mut rules = Vec::with_capacity(raw.len());
    let mut auto = i64::MIN / 2;
    for (line, group, tag, priority, pattern) in raw {
        let group: OperatorGroup = group
            .parse()
            .map_err(|e: UnknownGroup| RulesError::Syntax { line, message: e.to_string() })?;
        let pattern = Regex::new(&pattern).map_err(|e| RulesError::BadPattern { line, message: e.to_string() })?;
        let priority = priority.unwrap_or_else(|| {
            auto += 1;
            auto
        });
        rules.push(ClassificationRule {
            pattern,
            group,
            priority,
            source: RuleSource::File(source.to_string()),
            tag: tag.filter(|t| !t.is_empty()),
        });
    }
    let mut seen = BTreeSet::new();
    for r in &rules {
        if !seen.insert(r.priority) {
            return Err(RulesError::DuplicatePriority(r.priority));
        }
    }
    Ok(rules)
}

fn split_column(s: &str) -> Option<(&str, &str)> {
    let s = s.trim_start();
    let end = s.find(char::is_whitespace)?;
    let rest = s[end..].trim();
    if rest.is_empty() {
        None
    } else {
        Some((&s[..end], rest))
    }
}

/// Loads a rules file and merges it over the builtin ruleset.
pub fn load_rules(path: &Path) -> Result<Ruleset, RulesError> {
    let text = std::fs::read_to_string(path)?;
    let user = parse_rules(&text, &path.display().to_string())?;
    Ruleset::builtin().merged_with(user)
}

/// Per-event classification of a whole trace, including kernel inheritance.
#[derive(Clone, Debug)]
pub struct ClassifiedTrace {
    /// Group per event, indexed like `Trace::events`.
    pub groups: Vec<OperatorGroup>,
    /// Winning rule per event, `None` for fallback or inherited groups.
    pub rules: Vec<Option<usize>>,
    /// For kernels that inherited their group, the index of the CpuOp it
    /// came from.
    pub inherited_from: Vec<Option<usize>>,
}

impl ClassifiedTrace {
    /// Distinct operator names that no rule matched and that did not
    /// inherit a group, sorted. Runtime API calls (`cudaLaunchKernel`,
    /// `hipMalloc`, ...) are expected to land here and are left out.
    pub fn unmatched_names<'t>(&self, trace: &'t Trace) -> BTreeSet<&'t str> {
        static RUNTIME: OnceLock<Regex> = OnceLock::new();
        let runtime = RUNTIME.get_or_init(|| Regex::new(r"^(cuda|cu|hip|nccl)[A-Z]").unwrap());
        trace
            .events
            .iter()
            .enumerate()
            .filter(|&(i, e)| {
                matches!(e.kind, EventKind::CpuOp | EventKind::GpuKernel)
                    && self.groups[i] == OperatorGroup::Uncategorized
                    && self.rules[i].is_none()
                    && self.inherited_from[i].is_none()
                    && !runtime.is_match(&e.name)
            })
            .map(|(_, e)| e.name.as_str())
            .collect()
    }
}

/// Classifies every event of `trace`. A kernel whose name matches no rule
/// takes the group of its launching CpuOp; if the launcher is itself
/// unclassified (a runtime launch call), the nearest classified ancestor is
/// used.
pub fn classify_trace(ruleset: &Ruleset, trace: &Trace, tree: &EventTree) -> ClassifiedTrace {
    let mut cache: HashMap<&str, RuleMatch> = HashMap::new();
    let matches: Vec<RuleMatch> = trace
        .events
        .iter()
        .map(|e| *cache.entry(e.name.as_str()).or_insert_with(|| ruleset.match_name(&e.name)))
        .collect();
    let mut groups: Vec<OperatorGroup> = matches.iter().map(|m| m.group).collect();
    let mut rules: Vec<Option<usize>> = matches.iter().map(|m| m.rule).collect();

    let mut inherited_from = vec![None; trace.events.len()];
    let index: HashMap<u64, usize> = trace.events.iter().enumerate().map(|(i, e)| (e.id, i)).collect();
    for (i, ev) in trace.events.iter().enumerate() {
        if ev.kind != EventKind::GpuKernel || matches[i].rule.is_some() {
            continue;
        }
        let Some(owner) = tree.kernel_owner(ev.id) else { continue };
        let inherited = std::iter::once(owner)
            .chain(tree.ancestors(owner).map(|n| n.event_id))
            .map(|id| index[&id])
            .find(|&j| groups[j] != OperatorGroup::Uncategorized);
        if let Some(j) = inherited {
            groups[i] = groups[j];
            rules[i] = None;
            inherited_from[i] = Some(j);
        }
    }
    ClassifiedTrace { groups, rules, inherited_from }
}
