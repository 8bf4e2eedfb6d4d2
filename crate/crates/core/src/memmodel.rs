//! Analytical memory footprint and maximum context length.
//!
//! ```text
//! weights     = n_params · p
//! kv_cache    = B · S · L_attn · D_kv · 2 · p      D_kv = n_kv_heads · head_dim (GQA) or hidden_dim
//! activations = B · S · D · C · p
//! ssm_state   = n_layers_total · ssm_state_bytes_per_layer
//! total       = weights + kv_cache + activations + ssm_state + overhead
//! ```
//!
//! All arithmetic is checked 128-bit integer math. Gigabytes are decimal.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound reported for sequence-independent footprints.
pub const SEQ_CAP: u64 = (1 << 31) - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Transformer,
    Ssm,
    Hybrid,
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchKind::Transformer => "transformer",
            ArchKind::Ssm => "ssm",
            ArchKind::Hybrid => "hybrid",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMemConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub n_params: u64,
    pub p_bytes: u64,
    #[serde(default)]
    pub n_layers_attention: u64,
    pub n_layers_total: u64,
    pub hidden_dim: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_kv_heads: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<u64>,
    pub activation_factor_c: u64,
    #[serde(default)]
    pub ssm_state_bytes_per_layer: u64,
    #[serde(default)]
    pub overhead_bytes: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("memory budget must be positive")]
    ZeroBudget,
    #[error("byte count overflows 128-bit arithmetic")]
    Overflow,
}

impl ModelMemConfig {
    pub fn validate(&self) -> Result<(), MemError> {
        if ![1, 2, 4].contains(&self.p_bytes) {
            return Err(MemError::InvalidConfig(format!("p_bytes must be 1, 2 or 4, got {}", self.p_bytes)));
        }
        if self.n_kv_heads.is_some() && self.head_dim.is_none() {
            return Err(MemError::InvalidConfig("n_kv_heads is set but head_dim is not".into()));
        }
        if self.n_layers_attention > self.n_layers_total {
            return Err(MemError::InvalidConfig("n_layers_attention exceeds n_layers_total".into()));
        }
        Ok(())
    }

    /// Width of one key (or value) vector per token and layer.
    pub fn kv_dim(&self) -> u64 {
        match (self.n_kv_heads, self.head_dim) {
            (Some(h), Some(d)) => h * d,
            _ => self.hidden_dim,
        }
    }

    pub fn arch(&self) -> ArchKind {
        match (self.n_layers_attention > 0, self.ssm_state_bytes_per_layer > 0) {
            (false, true) => ArchKind::Ssm,
            (true, true) => ArchKind::Hybrid,
            (true, false) => ArchKind::Transformer,
            // No attention and no recurrent state: treat as a state-free SSM.
            (false, false) => ArchKind::Ssm,
        }
    }

    pub fn display_label(&self) -> String {
        self.label.clone().unwrap_or_else(|| format!("{}-{}p", self.arch(), self.n_params))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemFootprint {
    pub weights_bytes: u128,
    pub kv_cache_bytes: u128,
    pub activation_bytes: u128,
    pub ssm_state_bytes: u128,
    pub overhead_bytes: u128,
    pub total_bytes: u128,
}

fn mul(xs: &[u128]) -> Result<u128, MemError> {
    xs.iter().try_fold(1u128, |acc, &x| acc.checked_mul(x).ok_or(MemError::Overflow))
}

fn add(xs: &[u128]) -> Result<u128, MemError> {
    xs.iter().try_fold(0u128, |acc, &x| acc.checked_add(x).ok_or(MemError::Overflow))
}

pub fn footprint(cfg: &ModelMemConfig, batch: u64, seq: u64) -> Result<MemFootprint, MemError> {
    cfg.validate()?;
    if batch == 0 {
        return Err(MemError::ZeroBatch);
    }
    let (b, s, p) = (batch as u128, seq as u128, cfg.p_bytes as u128);
    let weights = mul(&[cfg.n_params as u128, p])?;
    let kv = mul(&[b, s, cfg.n_layers_attention as u128, cfg.kv_dim() as u128, 2, p])?;
    let act = mul(&[b, s, cfg.hidden_dim as u128, cfg.activation_factor_c as u128, p])?;
    let ssm = mul(&[cfg.n_layers_total as u128, cfg.ssm_state_bytes_per_layer as u128])?;
    let overhead = cfg.overhead_bytes as u128;
    Ok(MemFootprint {
        weights_bytes: weights,
        kv_cache_bytes: kv,
        activation_bytes: act,
        ssm_state_bytes: ssm,
        overhead_bytes: overhead,
        total_bytes: add(&[weights, kv, act, ssm, overhead])?,
    })
}

/// Marginal bytes per additional token: B·(L_attn·D_kv·2 + D·C)·p.
pub fn per_token_bytes(cfg: &ModelMemConfig, batch: u64) -> Result<u128, MemError> {
    let kv = mul(&[cfg.n_layers_attention as u128, cfg.kv_dim() as u128, 2])?;
    let act = mul(&[cfg.hidden_dim as u128, cfg.activation_factor_c as u128])?;
    mul(&[batch as u128, add(&[kv, act])?, cfg.p_bytes as u128])
}

pub fn fixed_bytes(cfg: &ModelMemConfig) -> Result<u128, MemError> {
    let f = footprint(cfg, 1, 0)?;
    Ok(f.total_bytes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LimitFlag {
    /// Weights, state and overhead alone exceed the budget.
    FixedExceedsBudget,
    /// Footprint does not grow with sequence length; S is capped.
    SequenceIndependent,
    /// The closed form exceeds the cap.
    Capped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqLimit {
    pub s_max: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<LimitFlag>,
    pub per_token_bytes: u128,
    pub fixed_bytes: u128,
}

/// Largest S with `footprint(cfg, batch, S).total <= budget`, up to [`SEQ_CAP`].
pub fn max_seq_len(cfg: &ModelMemConfig, batch: u64, budget_bytes: u128) -> Result<SeqLimit, MemError> {
    if budget_bytes == 0 {
        return Err(MemError::ZeroBudget);
    }
    if batch == 0 {
        return Err(MemError::ZeroBatch);
    }
    let fixed = fixed_bytes(cfg)?;
    let per_token = per_token_bytes(cfg, batch)?;
    let limit = |s_max, flag| SeqLimit { s_max, flag, per_token_bytes: per_token, fixed_bytes: fixed };
    if fixed > budget_bytes {
        return Ok(limit(0, Some(LimitFlag::FixedExceedsBudget)));
    }
    if per_token == 0 {
        return Ok(limit(SEQ_CAP, Some(LimitFlag::SequenceIndependent)));
    }
    let s = (budget_bytes - fixed) / per_token;
    Ok(if s > SEQ_CAP as u128 { limit(SEQ_CAP, Some(LimitFlag::Capped)) } else { limit(s as u64, None) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchRanking {
    pub label: String,
    pub arch: ArchKind,
    pub limit: SeqLimit,
    /// S_max relative to the best transformer entry.
    pub ratio_vs_transformer: Option<f64>,
}

/// Ranks configs by S_max, largest first; ties go by label.
pub fn compare_architectures(cfgs: &[ModelMemConfig], batch: u64, budget_bytes: u128) -> Result<Vec<ArchRanking>, MemError> {
    let mut rows = cfgs
        .iter()
        .map(|c| Ok((c.display_label(), c.arch(), max_seq_len(c, batch, budget_bytes)?)))
        .collect::<Result<Vec<_>, MemError>>()?;
    rows.sort_by(|a, b| b.2.s_max.cmp(&a.2.s_max).then_with(|| a.0.cmp(&b.0)));
    let best_transformer = rows.iter().filter(|r| r.1 == ArchKind::Transformer).map(|r| r.2.s_max).max();
    Ok(rows
        .into_iter()
        .map(|(label, arch, limit)| ArchRanking {
            label,
            arch,
            limit,
            ratio_vs_transformer: best_transformer.filter(|&t| t > 0).map(|t| limit.s_max as f64 / t as f64),
        })
        .collect())
}

pub fn decimal_gb(bytes: u128) -> f64 {
    bytes as f64 / 1e9
}

/// Parses byte budgets such as `24e9`, `24GB`, `24GiB` or `25769803776`.
pub fn parse_bytes(text: &str) -> Result<u128, String> {
    let t = text.trim();
    let split = t.find(|c: char| c.is_ascii_alphabetic() && c != 'e' && c != 'E').unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let scale: f64 = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 1.0,
        "kb" => 1e3,
        "mb" => 1e6,
        "gb" => 1e9,
        "tb" => 1e12,
        "kib" => 1024.0,
        "mib" => 1024f64.powi(2),
        "gib" => 1024f64.powi(3),
        "tib" => 1024f64.powi(4),
        other => return Err(format!("unknown byte unit '{other}'")),
    };
    if let Ok(n) = num.trim().parse::<u128>() {
        if scale.fract() == 0.0 {
            return n.checked_mul(scale as u128).ok_or_else(|| "byte count too large".to_string());
        }
    }
    let v: f64 = num.trim().parse().map_err(|_| format!("invalid byte count '{text}'"))?;
    let bytes = (v * scale).round();
    if !(bytes.is_finite() && (0.0..1e38).contains(&bytes)) {
        return Err(format!("invalid byte count '{text}'"));
    }
    Ok(bytes as u128)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dense(n_layers: u64, hidden: u64, c: u64) -> ModelMemConfig {
        ModelMemConfig {
            label: None,
            n_params: 1_000_000,
            p_bytes: 2,
            n_layers_attention: n_layers,
            n_layers_total: n_layers,
            hidden_dim: hidden,
            n_kv_heads: None,
            head_dim: None,
            activation_factor_c: c,
            ssm_state_bytes_per_layer: 0,
            overhead_bytes: 0,
        }
    }

    #[test]
    fn activation_example() {
        let cfg = dense(96, 16384, 192);
        let f = footprint(&cfg, 1, 2048).unwrap();
        assert_eq!(f.activation_bytes, 2048 * 16384 * 192 * 2);
        assert_eq!(f.activation_bytes, 12_884_901_888);
    }

    #[test]
    fn gqa_kv_example() {
        let mut cfg = dense(32, 4096, 0);
        cfg.n_kv_heads = Some(8);
        cfg.head_dim = Some(128);
        assert_eq!(footprint(&cfg, 1, 4096).unwrap().kv_cache_bytes, 536_870_912);
    }

    #[test]
    fn zero_sequence() {
        let mut cfg = dense(4, 64, 3);
        cfg.ssm_state_bytes_per_layer = 10;
        cfg.overhead_bytes = 7;
        let f = footprint(&cfg, 3, 0).unwrap();
        assert_eq!((f.kv_cache_bytes, f.activation_bytes), (0, 0));
        assert_eq!(f.total_bytes, 2_000_000 + 40 + 7);
    }

    #[test]
    fn limits_and_flags() {
        let mut rec = dense(0, 64, 0);
        rec.ssm_state_bytes_per_layer = 100;
        rec.n_layers_total = 2;
        let l = max_seq_len(&rec, 1, 10_000_000).unwrap();
        assert_eq!((l.s_max, l.flag), (SEQ_CAP, Some(LimitFlag::SequenceIndependent)));
        let l = max_seq_len(&dense(2, 8, 1), 1, 1000).unwrap();
        assert_eq!((l.s_max, l.flag), (0, Some(LimitFlag::FixedExceedsBudget)));
        let l = max_seq_len(&dense(1, 1, 0), 1, u64::MAX as u128).unwrap();
        assert_eq!(l.flag, Some(LimitFlag::Capped));
        assert!(matches!(max_seq_len(&dense(1, 1, 1), 1, 0), Err(MemError::ZeroBudget)));
    }

    #[test]
    fn config_validation() {
        let mut c = dense(1, 1, 1);
        c.p_bytes = 3;
        assert!(footprint(&c, 1, 1).is_err());
        let mut c = dense(1, 1, 1);
        c.n_kv_heads = Some(2);
        assert!(footprint(&c, 1, 1).is_err());
        assert!(matches!(footprint(&dense(1, 1, 1), 0, 1), Err(MemError::ZeroBatch)));
        let mut huge = dense(u64::MAX, u64::MAX, u64::MAX);
        huge.n_layers_total = u64::MAX;
        assert!(matches!(footprint(&huge, u64::MAX, u64::MAX), Err(MemError::Overflow)));
    }

    #[test]
    fn json_config() {
        let c: ModelMemConfig = serde_json::from_str(
            r#"{"n_params":8030000000,"p_bytes":2,"n_layers_attention":32,"n_layers_total":32,"hidden_dim":4096,"n_kv_heads":8,"head_dim":128,"activation_factor_c":64}"#,
        )
        .unwrap();
        assert_eq!(c.kv_dim(), 1024);
        assert_eq!(c.arch(), ArchKind::Transformer);
        assert!(serde_json::from_str::<ModelMemConfig>(r#"{"n_params":1,"bogus":2}"#).is_err());
    }

    #[test]
    fn byte_parsing() {
        assert_eq!(parse_bytes("24e9").unwrap(), 24_000_000_000);
        assert_eq!(parse_bytes("24GB").unwrap(), 24_000_000_000);
        assert_eq!(parse_bytes("1GiB").unwrap(), 1 << 30);
        assert_eq!(parse_bytes("1.5kb").unwrap(), 1500);
        assert_eq!(parse_bytes("123").unwrap(), 123);
        assert!(parse_bytes("12 parsecs").is_err());
        assert!(parse_bytes("-4").is_err());
    }

    #[test]
    fn ranking_orders_by_limit() {
        let t = dense(4, 64, 2);
        let mut s = dense(0, 64, 1);
        s.ssm_state_bytes_per_layer = 16;
        s.label = Some("ssm".into());
        let r = compare_architectures(&[t, s], 1, 50_000_000).unwrap();
        assert_eq!(r[0].label, "ssm");
        assert!(r[0].ratio_vs_transformer.unwrap() > 1.0);
        assert_eq!(r[1].ratio_vs_transformer, Some(1.0));
        assert_eq!(compare_architectures(&[dense(1, 1, 1)], 1, 10_000_000).unwrap().len(), 1);
    }

    /// Doubling then bisection over `footprint`, independent of the closed form.
    pub(crate) fn brute_force_max_seq(cfg: &ModelMemConfig, batch: u64, budget: u128) -> u64 {
        let fits = |s: u64| footprint(cfg, batch, s).map(|f| f.total_bytes <= budget).unwrap_or(false);
        if !fits(0) {
            return 0;
        }
        let mut hi = 1u64;
        while hi < SEQ_CAP && fits(hi) {
            hi = (hi * 2).min(SEQ_CAP);
        }
        if fits(hi) {
            return hi;
        }
        let mut lo = hi / 2;
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if fits(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    fn arb_config() -> impl Strategy<Value = ModelMemConfig> {
        (
            1u64..20_000_000_000,
            prop::sample::select(vec![1u64, 2, 4]),
            0u64..128,
            0u64..64,
            1u64..16_384,
            proptest::option::of((1u64..64, 1u64..256)),
            0u64..400,
            0u64..4_000_000,
            0u64..2_000_000_000,
        )
            .prop_map(|(n_params, p, l_attn, l_extra, hidden, gqa, c, ssm, overhead)| ModelMemConfig {
                label: None,
                n_params,
                p_bytes: p,
                n_layers_attention: l_attn,
                n_layers_total: l_attn + l_extra,
                hidden_dim: hidden,
                n_kv_heads: gqa.map(|g| g.0),
                head_dim: gqa.map(|g| g.1),
                activation_factor_c: c,
                ssm_state_bytes_per_layer: ssm,
                overhead_bytes: overhead,
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn closed_form_matches_brute_force(cfg in arb_config(), batch in 1u64..64, budget in 1u64..200_000_000_000) {
            let closed = max_seq_len(&cfg, batch, budget as u128).unwrap();
            prop_assert_eq!(closed.s_max, brute_force_max_seq(&cfg, batch, budget as u128));
        }

        #[test]
        fn constant_marginal_cost(cfg in arb_config(), batch in 1u64..16, s in 0u64..1_000_000) {
            let a = footprint(&cfg, batch, s).unwrap().total_bytes;
            let b = footprint(&cfg, batch, s + 1).unwrap().total_bytes;
            prop_assert_eq!(b - a, per_token_bytes(&cfg, batch).unwrap());
        }

        #[test]
        fn monotone_in_inputs(cfg in arb_config(), batch in 1u64..16, s in 0u64..100_000) {
            let base = footprint(&cfg, batch, s).unwrap();
            let parts = |f: &MemFootprint| [f.weights_bytes, f.kv_cache_bytes, f.activation_bytes, f.ssm_state_bytes, f.total_bytes];
            let bumps = [
                (footprint(&cfg, batch + 1, s).unwrap()),
                (footprint(&cfg, batch, s + 1).unwrap()),
                (footprint(&ModelMemConfig { n_layers_attention: cfg.n_layers_attention + 1, n_layers_total: cfg.n_layers_total + 1, ..cfg.clone() }, batch, s).unwrap()),
                (footprint(&ModelMemConfig { hidden_dim: cfg.hidden_dim + 1, ..cfg.clone() }, batch, s).unwrap()),
            ];
            for bumped in bumps {
                for (x, y) in parts(&base).iter().zip(parts(&bumped)) {
                    prop_assert!(y >= *x);
                }
            }
            if cfg.p_bytes < 4 {
                let wider = footprint(&ModelMemConfig { p_bytes: cfg.p_bytes * 2, ..cfg.clone() }, batch, s).unwrap();
                for (x, y) in parts(&base).iter().zip(parts(&wider)) {
                    prop_assert!(y >= *x);
                }
            }
        }

        #[test]
        fn gqa_with_all_heads_is_mha(heads in 1u64..64, head_dim in 1u64..256, layers in 1u64..64, s in 0u64..10_000) {
            let mha = dense(layers, heads * head_dim, 0);
            let gqa = ModelMemConfig { n_kv_heads: Some(heads), head_dim: Some(head_dim), ..mha.clone() };
            prop_assert_eq!(footprint(&mha, 1, s).unwrap().kv_cache_bytes, footprint(&gqa, 1, s).unwrap().kv_cache_bytes);
        }
    }
}
