//! Experiment configuration: declarative description of one run.
//!
//! Configs serialize to TOML with on-disk key names equal to the struct
//! field names. `validate` fills every unset field with the documented
//! defaults and aggregates all violations instead of stopping at the first.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::{resolve_model, registry_names, LossKind};

pub fn default_tau_init() -> f64 {
    (1.0 / 0.07f64).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { lr: 0.0002, beta1: 0.5, beta2: 0.999, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Upper clamp on the logit scale exp(tau).
    pub tau_scale_cap: f64,
    pub beta_trainable: bool,
    /// Lower clamp on beta; set to null to disable.
    pub beta_min: Option<f64>,
    /// Compare self-similarity matrices row by row (the default) or as
    /// flattened vectors.
    pub sk_rowwise: bool,
    /// Keep the unit diagonal when comparing self-similarity rows.
    pub sk_include_diagonal: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau_scale_cap: 100.0,
            beta_trainable: true,
            beta_min: Some(0.0),
            sk_rowwise: true,
            sk_include_diagonal: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Feature maps produced by each convolution.
    pub n_filters: usize,
    /// Temporal kernel length (1 x k).
    pub temporal_kernel: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub dropout: f64,
    pub ga_leaky_slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_filters: 40,
            temporal_kernel: 25,
            pool_kernel: 5,
            pool_stride: 5,
            dropout: 0.5,
            ga_leaky_slope: 0.2,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Fraction of training images held out per class for validation.
    pub val_fraction: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig { val_fraction: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub top_ks: Vec<usize>,
    /// Average test repetitions per image before embedding.
    pub average_repetitions: bool,
    /// Expected candidate count; checked against top_ks when set.
    pub n_candidates: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { top_ks: vec![1, 5], average_repetitions: false, n_candidates: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset root; falls back to the MUSE_DATA_ROOT environment variable.
    pub root: Option<PathBuf>,
    pub subject: Option<String>,
    /// Embedding provider: "stub", "precomputed", or "external".
    pub provider: String,
    /// Command invoked by the external provider.
    pub external_cmd: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { root: None, subject: None, provider: "stub".into(), external_cmd: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointPolicy {
    BestVal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Registry key naming the method (encoder + default loss).
    pub encoder_name: String,
    /// Operative loss; defaults to the registry row's loss.
    pub loss_name: Option<LossKind>,
    pub embedding_dim: usize,
    pub n_electrodes: usize,
    pub n_timepoints: usize,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub tau_init: f64,
    pub beta_init: f64,
    pub attention_heads: usize,
    pub checkpoint_policy: CheckpointPolicy,
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            encoder_name: "MUSE-SK".into(),
            loss_name: None,
            embedding_dim: 512,
            n_electrodes: 64,
            n_timepoints: 250,
            optimizer: OptimizerConfig::default(),
            batch_size: 1000,
            epochs: 200,
            seed: 0,
            tau_init: default_tau_init(),
            beta_init: 1.0,
            attention_heads: 5,
            checkpoint_policy: CheckpointPolicy::BestVal,
            loss: LossConfig::default(),
            encoder: EncoderConfig::default(),
            training: TrainingConfig::default(),
            eval: EvalConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// The operative loss after defaulting.
    pub fn effective_loss(&self) -> Result<LossKind> {
        match self.loss_name {
            Some(l) => Ok(l),
            None => Ok(resolve_model(&self.encoder_name)?.loss),
        }
    }

    /// Returns a fully defaulted, internally consistent config, or the
    /// aggregated list of violations.
    pub fn validate(mut self) -> Result<ExperimentConfig> {
        let mut errs: Vec<String> = Vec::new();

        match resolve_model(&self.encoder_name) {
            Ok(entry) => {
                if self.loss_name.is_none() {
                    self.loss_name = Some(entry.loss);
                }
            }
            Err(_) => errs.push(format!(
                "unknown encoder_name '{}'; valid keys: {}",
                self.encoder_name,
                registry_names().join(", ")
            )),
        }

        if self.embedding_dim == 0 {
            errs.push("embedding_dim must be positive".into());
        }
        if self.n_electrodes == 0 {
            errs.push("n_electrodes must be positive".into());
        }
        if self.n_timepoints == 0 {
            errs.push("n_timepoints must be positive".into());
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".into());
        }
        if self.epochs == 0 {
            errs.push("epochs must be positive".into());
        }
        if self.attention_heads == 0 {
            errs.push("attention_heads must be positive".into());
        }
        if self.optimizer.lr <= 0.0 {
            errs.push("optimizer.lr must be positive".into());
        }
        if !(0.0..1.0).contains(&self.optimizer.beta1) {
            errs.push("optimizer.beta1 must be in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.optimizer.beta2) {
            errs.push("optimizer.beta2 must be in [0, 1)".into());
        }
        if self.loss.tau_scale_cap <= 0.0 {
            errs.push("loss.tau_scale_cap must be positive".into());
        }
        if !(0.0..1.0).contains(&self.encoder.dropout) {
            errs.push("encoder.dropout must be in [0, 1)".into());
        }
        if self.encoder.n_filters == 0 || self.encoder.temporal_kernel == 0 {
            errs.push("encoder.n_filters and encoder.temporal_kernel must be positive".into());
        }
        if self.encoder.pool_kernel == 0 || self.encoder.pool_stride == 0 {
            errs.push("encoder.pool_kernel and encoder.pool_stride must be positive".into());
        }
        if !(0.0..1.0).contains(&self.training.val_fraction) {
            errs.push("training.val_fraction must be in [0, 1)".into());
        }
        if self.eval.top_ks.is_empty() {
            errs.push("eval.top_ks must not be empty".into());
        }
        if let Some(n) = self.eval.n_candidates {
            for &k in &self.eval.top_ks {
                if k > n {
                    errs.push(format!("eval top-k {k} exceeds candidate count {n}"));
                }
            }
        }
        if self.eval.top_ks.iter().any(|&k| k == 0) {
            errs.push("eval.top_ks entries must be positive".into());
        }

        if errs.is_empty() {
            Ok(self)
        } else {
            Err(Error::InvalidConfig { messages: errs })
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        toml::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io_at(&path, e))?;
        Self::from_toml(&text)
    }
}

/// Apply a `dotted.key=value` override to a TOML document before
/// deserialization. Values parse as TOML literals, falling back to strings.
pub fn apply_override(doc: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = doc;
    for (i, part) in parts.iter().enumerate() {
        if i + 1 == parts.len() {
            let table = cur
                .as_table_mut()
                .ok_or_else(|| Error::Format(format!("override key '{key}' traverses a non-table")))?;
            table.insert((*part).to_string(), parse_toml_literal(raw));
        } else {
            let table = cur
                .as_table_mut()
                .ok_or_else(|| Error::Format(format!("override key '{key}' traverses a non-table")))?;
            cur = table
                .entry((*part).to_string())
                .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
        }
    }
    Ok(())
}

/// Parse an override value as a TOML literal (number, bool, array, quoted
/// string); bare words fall back to plain strings.
fn parse_toml_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Value>() {
        Ok(toml::Value::Table(mut t)) => t.remove("v").unwrap_or(toml::Value::String(raw.into())),
        _ => toml::Value::String(raw.to_string()),
    }
}

/// Parse a config file with `key=value` overrides applied on top.
pub fn load_with_overrides(
    path: Option<&std::path::Path>,
    overrides: &[(String, String)],
) -> Result<ExperimentConfig> {
    let mut doc: toml::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io_at(p, e))?;
            text.parse::<toml::Value>().map_err(|e| Error::Format(e.to_string()))?
        }
        None => toml::Value::Table(toml::map::Map::new()),
    };
    for (k, v) in overrides {
        apply_override(&mut doc, k, v)?;
    }
    let cfg: ExperimentConfig =
        doc.try_into().map_err(|e: toml::de::Error| Error::Format(e.to_string()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gets_documented_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap().validate().unwrap();
        assert_eq!(cfg.optimizer.lr, 0.0002);
        assert_eq!(cfg.optimizer.beta1, 0.5);
        assert_eq!(cfg.optimizer.beta2, 0.999);
        assert_eq!(cfg.batch_size, 1000);
        assert_eq!(cfg.epochs, 200);
        assert_eq!(cfg.attention_heads, 5);
        assert_eq!(cfg.beta_init, 1.0);
        assert!((cfg.tau_init - (1.0f64 / 0.07).ln()).abs() < 1e-12);
        assert!((cfg.tau_init.exp() - 14.285714285714286).abs() < 1e-9);
    }

    #[test]
    fn unknown_encoder_error_names_registry_keys() {
        let mut cfg = ExperimentConfig::default();
        cfg.encoder_name = "bogus".into();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("bogus"));
        assert!(err.contains("MUSE-SK-Nerv-GA"));
    }

    #[test]
    fn zero_embedding_dim_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.embedding_dim = 0;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("embedding_dim must be positive"));
    }

    #[test]
    fn errors_aggregate() {
        let mut cfg = ExperimentConfig::default();
        cfg.encoder_name = "nope".into();
        cfg.embedding_dim = 0;
        cfg.batch_size = 0;
        match cfg.validate().unwrap_err() {
            Error::InvalidConfig { messages } => assert!(messages.len() >= 3),
            other => panic!("wrong error {other}"),
        }
    }

    #[test]
    fn validate_is_idempotent() {
        let cfg = ExperimentConfig::default().validate().unwrap();
        let twice = cfg.clone().validate().unwrap();
        assert_eq!(cfg, twice);
    }

    #[test]
    fn loss_defaults_from_registry() {
        let mut cfg = ExperimentConfig::default();
        cfg.encoder_name = "NICE-GA".into();
        let cfg = cfg.validate().unwrap();
        assert_eq!(cfg.loss_name, Some(LossKind::InfoNce));

        let mut cfg = ExperimentConfig::default();
        cfg.encoder_name = "MUSE-SK".into();
        let cfg = cfg.validate().unwrap();
        assert_eq!(cfg.loss_name, Some(LossKind::SkInfoNce));
    }

    #[test]
    fn toml_roundtrip_preserves_config() {
        let cfg = ExperimentConfig::default().validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn overrides_apply_on_dotted_keys() {
        let mut doc: toml::Value = "".parse().unwrap();
        apply_override(&mut doc, "optimizer.lr", "0.001").unwrap();
        apply_override(&mut doc, "encoder_name", "MUSE").unwrap();
        apply_override(&mut doc, "loss_name", "infonce").unwrap();
        let cfg: ExperimentConfig = doc.try_into().unwrap();
        let cfg = cfg.validate().unwrap();
        assert_eq!(cfg.optimizer.lr, 0.001);
        assert_eq!(cfg.encoder_name, "MUSE");
        assert_eq!(cfg.loss_name, Some(LossKind::InfoNce));
    }

    #[test]
    fn topk_must_not_exceed_candidates() {
        let mut cfg = ExperimentConfig::default();
        cfg.eval.n_candidates = Some(3);
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("exceeds candidate count"));
    }
}
