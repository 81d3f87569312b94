//! The run configuration: one JSON document covering data generation, training,
//! metrics and paths, with `--set key=value` overrides applied before
//! validation.

use std::path::{Path, PathBuf};

use pta_core::data::PhantomConfig;
use pta_core::metrics::{EvalOptions, ExtractorConfig};
use pta_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::failure::Failure;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const OUTPUT_ROOT_ENV: &str = "PTA_OUTPUT_ROOT";

/// Optional input locations; command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hf: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lf: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretext: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extractor: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairing: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces the seeds of `phantom`, `train` and `eval`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub phantom: PhantomConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub extractor: ExtractorConfig,
    pub paths: Paths,
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies overrides, then
    /// deserializes strictly and validates.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self, Failure> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str::<Value>(&text)
                    .map_err(|e| Failure::config(format!("config {} is not valid JSON: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Failure::config(e.to_string()))?;
        if let Some(seed) = cfg.seed {
            cfg.phantom.seed = seed;
            cfg.train.seed = seed;
            cfg.eval.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.phantom.validate().map_err(|e| Failure::from(e).context("phantom"))?;
        self.train.validate().map_err(|e| Failure::from(e).context("train"))?;
        self.eval.validate().map_err(|e| Failure::from(e).context("eval"))?;
        self.extractor.validate().map_err(|e| Failure::from(e).context("extractor"))?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// `a.b.c=value`; the value is parsed as JSON and falls back to a plain
/// string.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<(), Failure> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Failure::config(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Failure::config(format!("override key {key:?} is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut at = doc;
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = at else {
            return Err(Failure::config(format!(
                "override {key:?}: {} is not an object",
                parts[..i].join(".")
            )));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        at = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last key")
}

/// Relative output directories land under `$PTA_OUTPUT_ROOT` when it is set.
pub fn output_dir(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() && !root.is_empty() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}
