//! Run configuration: one TOML document covering every module, with
//! command-line overrides by dotted key (`train.total_steps=100`).
//!
//! Unknown keys are rejected. `data.source` and `train.total_steps` are
//! required; everything else has a documented default.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{StrongPolicy, WeakConfig};
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::ArchKind;
use crate::threshold::ThresholdMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub threshold: ThresholdConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default = "default_labels_per_class")]
    pub labels_per_class: usize,
    /// Binary record files for the training pool (CIFAR-10 source).
    #[serde(default)]
    pub train_files: Vec<PathBuf>,
    /// Binary record file for evaluation (CIFAR-10 source).
    #[serde(default)]
    pub test_file: Option<PathBuf>,
    /// Held-out examples per class for the synthetic source.
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
}

fn default_labels_per_class() -> usize {
    4
}

fn default_test_per_class() -> usize {
    250
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    /// Classification logits (the softmax input).
    Logits,
    /// Global-pooled features feeding the linear head.
    Penultimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_arch")]
    pub arch: ArchKind,
    #[serde(default = "default_conv_channels")]
    pub conv_channels: Vec<usize>,
    #[serde(default = "default_embedding")]
    pub embedding: EmbeddingSource,
}

fn default_arch() -> ArchKind {
    ArchKind::SmallCnn
}

fn default_conv_channels() -> Vec<usize> {
    vec![16, 32]
}

fn default_embedding() -> EmbeddingSource {
    EmbeddingSource::Logits
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: default_arch(),
            conv_channels: default_conv_channels(),
            embedding: default_embedding(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default)]
    pub weak: WeakConfig,
    #[serde(default)]
    pub strong: StrongPolicy,
    #[serde(default = "default_cutmix_alpha")]
    pub cutmix_alpha: f64,
}

fn default_cutmix_alpha() -> f64 {
    1.0
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            weak: WeakConfig::default(),
            strong: StrongPolicy::default(),
            cutmix_alpha: default_cutmix_alpha(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdConfig {
    #[serde(default = "default_threshold_mode")]
    pub mode: ThresholdMode,
    #[serde(default = "default_fixed_value")]
    pub fixed_value: f64,
    #[serde(default = "default_threshold_momentum")]
    pub momentum: f64,
}

fn default_threshold_mode() -> ThresholdMode {
    ThresholdMode::Adaptive
}

fn default_fixed_value() -> f64 {
    0.95
}

fn default_threshold_momentum() -> f64 {
    0.999
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            mode: default_threshold_mode(),
            fixed_value: default_fixed_value(),
            momentum: default_threshold_momentum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "yes")]
    pub use_pseudo: bool,
    #[serde(default = "yes")]
    pub use_cutmix: bool,
    #[serde(default = "yes")]
    pub use_lower: bool,
}

fn default_lambda() -> f64 {
    0.002
}

fn yes() -> bool {
    true
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
            use_pseudo: true,
            use_cutmix: true,
            use_lower: true,
        }
    }
}

impl ObjectiveConfig {
    pub fn supervised_only(&self) -> bool {
        !(self.use_pseudo || self.use_cutmix || self.use_lower)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "yes")]
    pub nesterov: bool,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_labeled_batch")]
    pub labeled_batch: usize,
    #[serde(default = "default_unlabeled_batch")]
    pub unlabeled_batch: usize,
    #[serde(default = "default_ema_decay")]
    pub ema_decay: f64,
    #[serde(default = "default_log_interval")]
    pub log_interval: u64,
    /// Zero disables checkpoints. Must be a multiple of `log_interval`.
    #[serde(default)]
    pub checkpoint_interval: u64,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
}

fn default_lr0() -> f64 {
    0.03
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

fn default_labeled_batch() -> usize {
    64
}

fn default_unlabeled_batch() -> usize {
    448
}

fn default_ema_decay() -> f64 {
    0.999
}

fn default_log_interval() -> u64 {
    256
}

fn default_eval_batch() -> usize {
    256
}

fn in_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::config(format!("`{name}` must lie in [0, 1], got {v}")))
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::config(format!("parse error: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())?;
        Self::from_toml_str(&text, overrides)
    }

    /// Fully resolved TOML with every default written out.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("serialize: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if !(t.lr0 > 0.0) {
            return Err(Error::config("`train.lr0` must be positive"));
        }
        in_unit("train.momentum", t.momentum)?;
        in_unit("train.ema_decay", t.ema_decay)?;
        if !(t.weight_decay >= 0.0) {
            return Err(Error::config("`train.weight_decay` must be non-negative"));
        }
        if t.labeled_batch == 0 || t.unlabeled_batch == 0 || t.eval_batch == 0 {
            return Err(Error::config("batch sizes must be at least 1"));
        }
        if t.log_interval == 0 {
            return Err(Error::config("`train.log_interval` must be at least 1"));
        }
        if t.checkpoint_interval % t.log_interval != 0 {
            return Err(Error::config(
                "`train.checkpoint_interval` must be a multiple of `train.log_interval`",
            ));
        }
        in_unit("threshold.fixed_value", self.threshold.fixed_value)?;
        in_unit("threshold.momentum", self.threshold.momentum)?;
        if !(self.objective.lambda >= 0.0) {
            return Err(Error::config("`objective.lambda` must be non-negative"));
        }
        if !(self.augment.cutmix_alpha > 0.0) {
            return Err(Error::config("`augment.cutmix_alpha` must be positive"));
        }
        in_unit("augment.weak.flip_prob", self.augment.weak.flip_prob)?;
        self.augment.strong.validate()?;
        match self.data.source {
            DataSource::Synthetic if self.data.synthetic.is_none() => {
                return Err(Error::config("missing required key `data.synthetic` for the synthetic source"));
            }
            DataSource::Cifar10 if self.data.train_files.is_empty() => {
                return Err(Error::config("missing required key `data.train_files` for the cifar10 source"));
            }
            _ => {}
        }
        if self.data.labels_per_class == 0 {
            return Err(Error::config("`data.labels_per_class` must be at least 1"));
        }
        Ok(())
    }
}

/// Applies `a.b.c=value`. The value is parsed as a TOML literal and falls
/// back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() {
        return Err(Error::config(format!("override `{assignment}` has an empty key")));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override key `{key}`: `{part}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Desk-scale reference configuration, bundled with the binary.
pub const DESK_CONFIG: &str = include_str!("../data/desk.toml");

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [data]
        source = "synthetic"
        [data.synthetic]
        class_count = 4
        per_class = 10
        [train]
        total_steps = 5
    "#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = RunConfig::from_toml_str(MINIMAL, &[]).unwrap();
        assert_eq!(c.train.lr0, 0.03);
        assert_eq!(c.train.momentum, 0.9);
        assert_eq!(c.train.ema_decay, 0.999);
        assert_eq!(c.train.unlabeled_batch, 448);
        assert_eq!(c.train.labeled_batch, 64);
        assert_eq!(c.objective.lambda, 0.002);
        assert_eq!(c.threshold.fixed_value, 0.95);
        assert_eq!(c.augment.strong.catalog.len(), 14);
    }

    #[test]
    fn missing_required_key_is_named() {
        let text = MINIMAL.replace("total_steps = 5", "");
        let err = RunConfig::from_toml_str(&text, &[]).unwrap_err().to_string();
        assert!(err.contains("total_steps"), "{err}");
        let text = MINIMAL.replace("source = \"synthetic\"", "");
        let err = RunConfig::from_toml_str(&text, &[]).unwrap_err().to_string();
        assert!(err.contains("source"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str(MINIMAL, &["objective.lamda=0".into()]).unwrap_err().to_string();
        assert!(err.contains("lamda"), "{err}");
    }

    #[test]
    fn overrides_take_precedence_and_round_trip() {
        let c = RunConfig::from_toml_str(
            MINIMAL,
            &["objective.lambda=0".into(), "threshold.mode=fixed".into(), "seed=9".into()],
        )
        .unwrap();
        assert_eq!(c.objective.lambda, 0.0);
        assert_eq!(c.threshold.mode, ThresholdMode::Fixed);
        let snapshot = c.to_toml_string().unwrap();
        assert!(snapshot.contains("lambda = 0.0"), "{snapshot}");
        assert_eq!(RunConfig::from_toml_str(&snapshot, &[]).unwrap(), c);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for o in ["train.momentum=1.5", "objective.lambda=-1", "train.labeled_batch=0", "augment.cutmix_alpha=0"] {
            assert!(RunConfig::from_toml_str(MINIMAL, &[o.into()]).is_err(), "{o}");
        }
    }

    #[test]
    fn bundled_desk_config_parses() {
        let c = RunConfig::from_toml_str(DESK_CONFIG, &[]).unwrap();
        assert_eq!(c.train.total_steps, 4096);
    }
}
