//! Per-benchmark dataset layout, metrics and inference parameters.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::KeyMap;
use super::metrics::Metric;

const DEFAULT_PRESETS: &str = include_str!("../../assets/presets.yaml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkPreset {
    pub keymap: KeyMap,
    pub metrics: Vec<Metric>,
    pub max_new_tokens: u32,
    pub n_docs: usize,
    /// Task template name; defaults to the benchmark name.
    #[serde(default)]
    pub task_instruction: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum PresetError {
    #[error("cannot read preset file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid preset file: {0}")]
    Yaml(#[from] serde_yaml::Error),
    #[error("preset `{name}`: {reason}")]
    Invalid { name: String, reason: String },
    #[error("unknown benchmark preset `{0}`")]
    Unknown(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PresetTable {
    presets: BTreeMap<String, BenchmarkPreset>,
}

impl PresetTable {
    pub fn defaults() -> Self {
        Self::from_yaml_str(DEFAULT_PRESETS).expect("bundled presets are valid")
    }

    pub fn from_yaml_str(yaml: &str) -> Result<Self, PresetError> {
        let presets: BTreeMap<String, BenchmarkPreset> = serde_yaml::from_str(yaml)?;
        for (name, p) in &presets {
            let invalid = |reason: &str| PresetError::Invalid {
                name: name.clone(),
                reason: reason.to_string(),
            };
            if p.metrics.is_empty() {
                return Err(invalid("no metrics listed"));
            }
            if p.max_new_tokens == 0 || p.n_docs == 0 {
                return Err(invalid("max_new_tokens and n_docs must be positive"));
            }
            let wants_short = p.metrics.iter().any(|m| matches!(m, Metric::StrEm | Metric::StrHit));
            if wants_short && p.keymap.short_answers_key.is_none() {
                return Err(invalid("str_em/str_hit need keymap.short_answers_key"));
            }
        }
        Ok(Self { presets })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PresetError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| PresetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_yaml_str(&text)
    }

    pub fn get(&self, name: &str) -> Result<&BenchmarkPreset, PresetError> {
        self.presets
            .get(name)
            .ok_or_else(|| PresetError::Unknown(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.presets.keys().map(String::as_str).collect()
    }
}

impl BenchmarkPreset {
    pub fn task_instruction<'a>(&'a self, benchmark: &'a str) -> &'a str {
        self.task_instruction.as_deref().unwrap_or(benchmark)
    }
}
