//! Run configuration: one JSON document holding every tunable, layered as
//! preset, then file, then command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Corpus manifest.
    pub manifest: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Worker threads for cache building and chains; `None` uses all cores.
    pub threads: Option<usize>,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Preset::Unconstrained.config()
    }
}

/// Starting points that differ only in the number of mixture components.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Vocabulary size roughly known: few components.
    Constrained,
    /// Generous upper bound on the vocabulary.
    Unconstrained,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "constrained" => Ok(Preset::Constrained),
            "unconstrained" => Ok(Preset::Unconstrained),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected constrained or unconstrained)"
            ))),
        }
    }

    pub fn config(self) -> RunConfig {
        let mut pipeline = PipelineConfig::default();
        pipeline.gmm.k = match self {
            Preset::Constrained => 15,
            Preset::Unconstrained => 100,
        };
        RunConfig {
            manifest: None,
            output_dir: None,
            threads: None,
            pipeline,
        }
    }
}

/// Recursively overlays `patch` onto `base`; objects merge, anything else
/// replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Preset overlaid with the JSON at `path`. Unknown keys are rejected.
    pub fn load(preset: Preset, path: Option<&Path>) -> Result<Self> {
        let base = preset.config();
        let Some(path) = path else {
            return Ok(base);
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::overlay(base, patch)
    }

    /// `base` with `patch` merged in.
    pub fn overlay(base: Self, patch: Value) -> Result<Self> {
        let mut value = serde_json::to_value(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut value, patch);
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks everything up front so a bad setting fails before any compute.
    pub fn validate(&self) -> Result<()> {
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        self.pipeline.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
