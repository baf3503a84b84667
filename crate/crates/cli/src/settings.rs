//! Run configuration: preset, config file, `--set` overrides and `--seed`.

use std::path::Path;

use abn::config::{apply_overrides, flatten, parse_override_value, Config, EvalConfig, InferConfig, ModelConfig, TrainConfig};
use abn::io_synth::SynthSpec;
use abn::Error;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_core(Config::desk())
    }
}

impl RunConfig {
    pub fn from_core(c: Config) -> Self {
        RunConfig {
            model: c.model,
            train: c.train,
            infer: c.infer,
            eval: c.eval,
            synth: SynthSpec::default(),
        }
    }

    pub fn full() -> Self {
        RunConfig::from_core(Config::default())
    }

    pub fn core(&self) -> Config {
        Config {
            model: self.model.clone(),
            train: self.train.clone(),
            infer: self.infer.clone(),
            eval: self.eval.clone(),
        }
    }

    /// Flat `key: value` form written next to every run's outputs.
    pub fn echo(&self) -> Value {
        Value::Object(flatten(&serde_json::to_value(self).expect("plain data")))
    }
}

/// Parses `key=value` arguments.
pub fn parse_sets(sets: &[String]) -> Result<Map<String, Value>, Error> {
    let mut out = Map::new();
    for s in sets {
        let (k, v) = s.split_once('=').ok_or_else(|| Error::Config {
            key: s.clone(),
            reason: "expected key=value".into(),
        })?;
        out.insert(k.trim().to_string(), parse_override_value(v.trim()));
    }
    Ok(out)
}

/// Applies a config file (flat or nested JSON), then overrides, then the seed.
pub fn resolve(base: RunConfig, file: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<RunConfig, Error> {
    let mut value = serde_json::to_value(&base).expect("plain data");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        let parsed: Value = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        if !parsed.is_object() {
            return Err(Error::Config {
                key: path.display().to_string(),
                reason: "config file must be a JSON object".into(),
            });
        }
        apply_overrides(&mut value, &flatten(&parsed))?;
    }
    apply_overrides(&mut value, &parse_sets(sets)?)?;
    if let Some(s) = seed {
        let mut m = Map::new();
        m.insert("train.seed".into(), s.into());
        m.insert("synth.seed".into(), s.into());
        apply_overrides(&mut value, &m)?;
    }
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config {
        key: "<config>".into(),
        reason: e.to_string(),
    })?;
    cfg.core().validate()?;
    cfg.synth.validate()?;
    Ok(cfg)
}
