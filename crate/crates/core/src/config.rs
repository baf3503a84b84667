//! Model, training, inference and evaluation settings.
//!
//! Defaults follow the published setup where one exists. Configs serialize
//! to nested JSON; [`flatten`] and [`apply_overrides`] provide the flat
//! dotted-key view used by config files and `--set key=value` overrides.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Which per-snippet representation feeds the boundary network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Agent features pooled, then fused with the environment feature.
    AgentEnv,
    /// Environment (global) feature only; the fusion network is bypassed.
    EnvOnly,
    /// Pooled agent feature only.
    AgentOnly,
}

/// Channel widths of the boundary network layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetWidths {
    pub base1: usize,
    pub base2: usize,
    pub base3: usize,
    pub pam3d: usize,
    pub pam2d: usize,
}

impl Default for NetWidths {
    fn default() -> Self {
        NetWidths {
            base1: 256,
            base2: 128,
            base3: 256,
            pam3d: 512,
            pam2d: 128,
        }
    }
}

/// Snippet-overlap normalisation for boundary labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapNorm {
    /// `|r_n ∩ r| / |r_n|`
    Snippet,
    /// `|r_n ∩ r| / |r|`
    Region,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapAggregate {
    Max,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Rescaled snippet count `T`.
    pub temporal_scale: usize,
    /// Maximum proposal duration `D` in snippets.
    pub max_duration: usize,
    /// Input feature dimension `C`.
    pub feature_dim: usize,
    /// Samples per proposal in the matching layer.
    pub num_samples: usize,
    /// Per-side extension of the sampled region, as a fraction of the proposal length.
    pub extension_ratio: f64,
    pub heads: usize,
    pub layers: usize,
    /// Feed-forward width as a multiple of `C`.
    pub ffn_mult: usize,
    /// Wrap attention in residual + layer-norm + feed-forward sublayers.
    /// When false each encoder layer is bare multi-head attention.
    pub encoder_block: bool,
    pub feature_mode: FeatureMode,
    pub widths: NetWidths,
    pub lambda_reg: f64,
    pub lambda_tam: f64,
    pub lambda_pam: f64,
    /// Regress `P_cr` against binary duration labels instead of dense IoU.
    pub regress_binary: bool,
    pub overlap_norm: OverlapNorm,
    pub overlap_aggregate: OverlapAggregate,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            temporal_scale: 100,
            max_duration: 100,
            feature_dim: 400,
            num_samples: 32,
            extension_ratio: 0.25,
            heads: 4,
            layers: 1,
            ffn_mult: 2,
            encoder_block: true,
            feature_mode: FeatureMode::AgentEnv,
            widths: NetWidths::default(),
            lambda_reg: 10.0,
            lambda_tam: 1.0,
            lambda_pam: 1.0,
            regress_binary: false,
            overlap_norm: OverlapNorm::Snippet,
            overlap_aggregate: OverlapAggregate::Max,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let t = self.temporal_scale;
        if t < 3 {
            return Err(Error::config("model.temporal_scale", "must be at least 3 (kernel size)"));
        }
        if self.max_duration < 1 || self.max_duration > t {
            return Err(Error::config("model.max_duration", format!("must be in 1..={t}")));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("model.feature_dim", "must be positive"));
        }
        if self.num_samples < 2 {
            return Err(Error::config("model.num_samples", "must be at least 2"));
        }
        if self.heads == 0 || self.feature_dim % self.heads != 0 {
            return Err(Error::config("model.heads", "must divide model.feature_dim"));
        }
        if self.layers == 0 {
            return Err(Error::config("model.layers", "must be positive"));
        }
        if self.ffn_mult == 0 {
            return Err(Error::config("model.ffn_mult", "must be positive"));
        }
        if !(self.extension_ratio >= 0.0 && self.extension_ratio.is_finite()) {
            return Err(Error::config("model.extension_ratio", "must be finite and >= 0"));
        }
        let w = &self.widths;
        for (k, v) in [
            ("model.widths.base1", w.base1),
            ("model.widths.base2", w.base2),
            ("model.widths.base3", w.base3),
            ("model.widths.pam3d", w.pam3d),
            ("model.widths.pam2d", w.pam2d),
        ] {
            if v == 0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        for (k, v) in [
            ("model.lambda_reg", self.lambda_reg),
            ("model.lambda_tam", self.lambda_tam),
            ("model.lambda_pam", self.lambda_pam),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(k, "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub tau_upper: f64,
    pub tau_lower: f64,
    pub seed: u64,
    /// Evaluate validation AUC after every epoch and keep the best parameters.
    pub select_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: 10,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            tau_upper: 0.98,
            tau_lower: 0.3,
            seed: 0,
            select_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.beta1", "betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("train.adam_eps", "must be positive"));
        }
        if !(self.tau_lower < self.tau_upper) {
            return Err(Error::config("train.tau_lower", "must be below train.tau_upper"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmsKind {
    Soft,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Peaks also include every index at or above this fraction of the maximum.
    pub tau_rel: f64,
    pub nms: NmsKind,
    pub soft_nms_sigma: f64,
    pub score_floor: f64,
    pub hard_nms_iou: f64,
    pub top_k: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            tau_rel: 0.5,
            nms: NmsKind::Soft,
            soft_nms_sigma: 0.4,
            score_floor: 0.001,
            hard_nms_iou: 0.65,
            top_k: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPreset {
    /// 0.50:0.05:0.95
    Activitynet,
    /// 0.50:0.05:1.00
    Thumos,
}

impl ThresholdPreset {
    pub fn recall_thresholds(self) -> Vec<f64> {
        let last = match self {
            ThresholdPreset::Activitynet => 95,
            ThresholdPreset::Thumos => 100,
        };
        (50..=last).step_by(5).map(|k| k as f64 / 100.0).collect()
    }

    pub fn detection_thresholds(self) -> Vec<f64> {
        match self {
            ThresholdPreset::Activitynet => vec![0.5, 0.75, 0.95],
            ThresholdPreset::Thumos => (3..=7).map(|k| k as f64 / 10.0).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalBudget {
    /// Top-AN proposals of every video.
    PerVideo,
    /// `AN * videos` proposals shared across the dataset by score.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub preset: ThresholdPreset,
    pub max_an: usize,
    pub budget: ProposalBudget,
    /// Average numbers reported individually in `ar_at_an`.
    pub report_an: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            preset: ThresholdPreset::Activitynet,
            max_an: 100,
            budget: ProposalBudget::PerVideo,
            report_an: vec![1, 5, 10, 50, 100],
        }
    }
}

/// Everything the pipeline needs besides data.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
}

impl Config {
    /// Settings sized for the default synthetic set on a single CPU core:
    /// 50 snippets of 32-dimensional features and a narrower boundary network.
    pub fn desk() -> Self {
        let mut cfg = Config::default();
        cfg.model.temporal_scale = 50;
        cfg.model.max_duration = 50;
        cfg.model.feature_dim = 32;
        cfg.model.num_samples = 16;
        cfg.model.widths = NetWidths {
            base1: 64,
            base2: 32,
            base3: 64,
            pam3d: 64,
            pam2d: 32,
        };
        cfg.train.batch_size = 4;
        cfg.train.epochs = 30;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

/// Flattens nested JSON objects into dotted keys. Arrays stay leaves.
pub fn flatten(value: &Value) -> Map<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
        match v {
            Value::Object(m) => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = Map::new();
    walk("", value, &mut out);
    out
}

/// Sets each dotted key on `base`. Keys that do not already exist are rejected.
pub fn apply_overrides(base: &mut Value, overrides: &Map<String, Value>) -> Result<()> {
    for (key, v) in overrides {
        let mut node = &mut *base;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| Error::config(key.as_str(), "unknown key"))?;
            let child = obj
                .get_mut(*part)
                .ok_or_else(|| Error::config(key.as_str(), "unknown key"))?;
            if i + 1 == parts.len() {
                if child.is_object() {
                    return Err(Error::config(key.as_str(), "names a section, not a value"));
                }
                *child = v.clone();
            }
            node = child;
        }
    }
    Ok(())
}

/// Parses the right-hand side of `key=value`: JSON when it parses, a string otherwise.
pub fn parse_override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies flat overrides to `base` and deserializes the result.
pub fn with_overrides<T>(base: &T, overrides: &Map<String, Value>) -> Result<T>
where
    T: Serialize + DeserializeOwned,
{
    let mut v = serde_json::to_value(base).map_err(|e| Error::config("<config>", e.to_string()))?;
    apply_overrides(&mut v, overrides)?;
    serde_json::from_value(v).map_err(|e| {
        let key = overrides.keys().next().cloned().unwrap_or_default();
        Error::config(key, e.to_string())
    })
}
