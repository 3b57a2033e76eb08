//! One YAML file describing a whole run.
//!
//! ```yaml
//! seed: 42
//! algorithm: naive_rag
//! generator:
//!   endpoints:
//!     main: {kind: openai, base_url: "http://localhost:8000/v1", model: llama3-8b}
//! retriever: {index: wiki.bm25}
//! benchmark: {preset: popqa, dataset: data/popqa.jsonl}
//! ```
//!
//! Relative paths resolve against the file's directory. `--set a.b=value`
//! overrides are applied to the YAML tree before it is typed, so they go
//! through the same validation as the file itself.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_yaml::{Mapping, Value};

use crate::algorithms::{
    ActiveRagConfig, AlgorithmConfig, AlgorithmKind, InstructionSelection, IterRetgenConfig, SelfAskConfig,
    SelfRagConfig,
};
use crate::eval::{BenchmarkPreset, PresetTable};
use crate::generator::{EndpointKind, EndpointPoolConfig, GenParams};
use crate::instruction::{load_pools, InstructionStore, PoolKind};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config is not valid YAML: {0}")]
    Syntax(String),
    #[error("config field `{field}`: {message}")]
    Field { field: String, message: String },
    #[error("override `{0}` must look like key.path=value")]
    Override(String),
    #[error("config field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn default_seed() -> u64 {
    42
}

fn default_sample_size() -> usize {
    500
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_parallelism() -> usize {
    1
}

fn default_system() -> String {
    "default".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    /// Falls back to the benchmark preset, then 300.
    pub max_new_tokens: Option<u32>,
    pub temperature: f64,
    pub logprobs_top_k: u32,
    pub stop: Vec<String>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        let p = GenParams::default();
        Self {
            max_new_tokens: None,
            temperature: p.temperature,
            logprobs_top_k: p.logprobs_top_k,
            stop: p.stop,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieverConfig {
    /// Local BM25 index file.
    pub index: Option<PathBuf>,
    /// Remote retrieval service, e.g. `http://127.0.0.1:8765`.
    pub endpoint: Option<String>,
    /// Persistent query cache for a local index.
    pub cache: Option<PathBuf>,
    pub max_cache_entries: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstructionsConfig {
    /// Instruction pool file; the bundled pools when absent.
    pub path: Option<PathBuf>,
    pub system_instruction: String,
    /// Falls back to the benchmark's task template, then `default`.
    pub task_instruction: Option<String>,
    /// Replaces the selected algorithm's main template.
    pub algorithm_instruction: Option<String>,
    /// Per-stage template overrides, e.g. `rrr_rewrite: my_rewrite`.
    pub stages: BTreeMap<String, String>,
}

impl Default for InstructionsConfig {
    fn default() -> Self {
        Self {
            path: None,
            system_instruction: default_system(),
            task_instruction: None,
            algorithm_instruction: None,
            stages: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub preset: String,
    pub dataset: Option<PathBuf>,
    pub presets_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub algorithm: AlgorithmKind,
    #[serde(default)]
    pub n_docs: Option<usize>,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub iter_retgen: IterRetgenConfig,
    #[serde(default)]
    pub self_ask: SelfAskConfig,
    #[serde(default)]
    pub active_rag: ActiveRagConfig,
    #[serde(default)]
    pub self_rag: SelfRagConfig,
    pub generator: EndpointPoolConfig,
    #[serde(default)]
    pub retriever: RetrieverConfig,
    #[serde(default)]
    pub instructions: InstructionsConfig,
    #[serde(default)]
    pub benchmark: Option<BenchmarkConfig>,
    #[serde(default = "default_sample_size")]
    pub sample_size: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

/// Parses `key.path=value`; the value is read as a YAML scalar or flow
/// collection.
pub fn parse_override(arg: &str) -> Result<(String, Value), ConfigError> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(arg.to_string()))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::Override(arg.to_string()));
    }
    let value = serde_yaml::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Sets `value` at dotted `key`, creating intermediate mappings.
pub fn apply_override(root: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if node.is_null() {
            *node = Value::Mapping(Mapping::new());
        }
        let map = node
            .as_mapping_mut()
            .ok_or_else(|| invalid(&parts[..i].join("."), format!("cannot set `{key}`: not a mapping")))?;
        let k = Value::String((*part).to_string());
        if i + 1 == parts.len() {
            map.insert(k, value);
            return Ok(());
        }
        node = map.entry(k).or_insert(Value::Null);
    }
    Ok(())
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Types a YAML tree, naming the offending field on failure.
    pub fn from_value(value: Value) -> Result<Self, ConfigError> {
        serde_path_to_error::deserialize(value).map_err(|e| ConfigError::Field {
            field: e.path().to_string(),
            message: e.into_inner().to_string(),
        })
    }

    pub fn from_yaml_str(yaml: &str, overrides: &[String], base_dir: &Path) -> Result<Self, ConfigError> {
        let mut tree: Value = serde_yaml::from_str(yaml).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        for arg in overrides {
            let (key, value) = parse_override(arg)?;
            apply_override(&mut tree, &key, value)?;
        }
        let mut cfg = Self::from_value(tree)?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = if base.as_os_str().is_empty() {
            PathBuf::from(".")
        } else {
            base
        };
        Self::from_yaml_str(&text, overrides, &base)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.retriever.index,
            &mut self.retriever.cache,
            &mut self.instructions.path,
        ]
        .into_iter()
        .flatten()
        {
            resolve(base, p);
        }
        if let Some(b) = &mut self.benchmark {
            for p in [&mut b.dataset, &mut b.presets_file].into_iter().flatten() {
                resolve(base, p);
            }
        }
        for ep in self.generator.endpoints.values_mut() {
            if let Some(s) = &mut ep.script {
                resolve(base, s);
            }
        }
        resolve(base, &mut self.output_dir);
    }

    /// This config with `overrides` applied, re-validated.
    pub fn with_overrides(&self, overrides: &[(String, Value)]) -> Result<Self, ConfigError> {
        let mut tree = serde_yaml::to_value(self).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        for (k, v) in overrides {
            apply_override(&mut tree, k, v.clone())?;
        }
        Self::from_value(tree)
    }

    pub fn algorithm_config(&self) -> AlgorithmConfig {
        AlgorithmConfig {
            iter_retgen: self.iter_retgen.clone(),
            self_ask: self.self_ask.clone(),
            active_rag: self.active_rag.clone(),
            self_rag: self.self_rag.clone(),
        }
    }

    /// The config as JSON, for echoing into reports.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Checks every referenced module's constraints and loads the
    /// instruction and preset tables, without touching any backend.
    pub fn prepare(&self) -> Result<PreparedConfig, ConfigError> {
        self.algorithm_config()
            .validate()
            .map_err(|e| invalid(self.algorithm.name(), e.to_string()))?;
        if self.n_docs == Some(0) {
            return Err(invalid("n_docs", "must be at least 1"));
        }
        if self.sample_size == 0 {
            return Err(invalid("sample_size", "must be at least 1"));
        }
        if self.parallelism == 0 {
            return Err(invalid("parallelism", "must be at least 1"));
        }
        let g = &self.generation;
        if !(g.temperature.is_finite() && g.temperature >= 0.0) {
            return Err(invalid("generation.temperature", "must be a finite value >= 0"));
        }
        if g.max_new_tokens == Some(0) {
            return Err(invalid("generation.max_new_tokens", "must be at least 1"));
        }
        if g.stop.iter().any(String::is_empty) {
            return Err(invalid("generation.stop", "stop sequences must be non-empty"));
        }
        self.generator
            .validate()
            .map_err(|e| invalid("generator", e.to_string()))?;
        for (name, ep) in &self.generator.endpoints {
            if let (EndpointKind::Scripted, Some(script)) = (ep.kind, &ep.script) {
                if !script.is_file() {
                    return Err(invalid(
                        &format!("generator.endpoints.{name}.script"),
                        format!("{} does not exist", script.display()),
                    ));
                }
            }
        }
        let r = &self.retriever;
        match (&r.index, &r.endpoint) {
            (Some(_), Some(_)) => return Err(invalid("retriever", "set either `index` or `endpoint`, not both")),
            (None, None) => return Err(invalid("retriever", "set `index` or `endpoint`")),
            (Some(index), None) if !index.is_file() => {
                return Err(invalid(
                    "retriever.index",
                    format!("{} does not exist", index.display()),
                ))
            }
            (None, Some(_)) if r.cache.is_some() => {
                return Err(invalid("retriever.cache", "a remote retriever keeps its own cache"))
            }
            _ => {}
        }
        let instructions = match &self.instructions.path {
            Some(p) => load_pools(p).map_err(|e| invalid("instructions.path", e.to_string()))?,
            None => InstructionStore::defaults(),
        };
        let benchmark = match &self.benchmark {
            Some(b) => {
                let table = match &b.presets_file {
                    Some(p) => PresetTable::load(p).map_err(|e| invalid("benchmark.presets_file", e.to_string()))?,
                    None => PresetTable::defaults(),
                };
                let preset = table
                    .get(&b.preset)
                    .map_err(|e| invalid("benchmark.preset", format!("{e} (known: {})", table.names().join(", "))))?
                    .clone();
                if let Some(d) = &b.dataset {
                    if !d.is_file() {
                        return Err(invalid("benchmark.dataset", format!("{} does not exist", d.display())));
                    }
                }
                Some((b.preset.clone(), preset))
            }
            None => None,
        };
        let task = self
            .instructions
            .task_instruction
            .clone()
            .or_else(|| benchmark.as_ref().map(|(name, p)| p.task_instruction(name).to_string()))
            .unwrap_or_else(|| "default".to_string());
        let mut selection = InstructionSelection::new(self.instructions.system_instruction.clone(), task);
        selection.algorithm = self.instructions.stages.clone();
        let algorithm = self.algorithm_config().build(self.algorithm);
        if let Some(main) = &self.instructions.algorithm_instruction {
            selection
                .algorithm
                .insert(algorithm.stages()[0].to_string(), main.clone());
        }
        instructions
            .get(PoolKind::System, &selection.system)
            .map_err(|e| invalid("instructions.system_instruction", e.to_string()))?;
        instructions
            .get(PoolKind::Task, &selection.task)
            .map_err(|e| invalid("instructions.task_instruction", e.to_string()))?;
        for stage in algorithm.stages() {
            instructions
                .get(PoolKind::Algorithm, selection.template_for(stage))
                .map_err(|e| invalid("instructions.algorithm_instruction", e.to_string()))?;
        }
        let preset = benchmark.as_ref().map(|(_, p)| p);
        let params = GenParams {
            max_new_tokens: g.max_new_tokens.or(preset.map(|p| p.max_new_tokens)).unwrap_or(300),
            temperature: g.temperature,
            seed: self.seed,
            logprobs_top_k: g.logprobs_top_k,
            stop: g.stop.clone(),
        };
        let n_docs = self.n_docs.or(preset.map(|p| p.n_docs)).unwrap_or(10);
        Ok(PreparedConfig {
            config: self.clone(),
            instructions,
            selection,
            params,
            n_docs,
            benchmark,
        })
    }
}

/// A validated config with its derived settings.
#[derive(Debug, Clone)]
pub struct PreparedConfig {
    pub config: RunConfig,
    pub instructions: InstructionStore,
    pub selection: InstructionSelection,
    pub params: GenParams,
    pub n_docs: usize,
    pub benchmark: Option<(String, BenchmarkPreset)>,
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "algorithm: direct\ngenerator:\n  endpoints:\n    main: {kind: openai, base_url: 'http://x/v1', model: m}\nretriever: {endpoint: 'http://127.0.0.1:1'}\n";

    #[test]
    fn defaults_and_overrides() {
        let cfg = RunConfig::from_yaml_str(MINIMAL, &[], Path::new("/base")).unwrap();
        assert_eq!((cfg.seed, cfg.sample_size, cfg.parallelism), (42, 500, 1));
        assert_eq!(cfg.output_dir, PathBuf::from("/base/runs"));
        let cfg = RunConfig::from_yaml_str(
            MINIMAL,
            &[
                "algorithm=iter_retgen".into(),
                "iter_retgen.max_iteration=4".into(),
                "self_rag.mode=always".into(),
            ],
            Path::new("/base"),
        )
        .unwrap();
        assert_eq!(cfg.algorithm, AlgorithmKind::IterRetgen);
        assert_eq!(cfg.iter_retgen.max_iteration, 4);
        assert_eq!(cfg.to_json()["iter_retgen"]["max_iteration"], 4);
        let p = cfg.prepare().unwrap();
        assert_eq!(
            (p.params.max_new_tokens, p.n_docs, p.selection.task.as_str()),
            (300, 10, "default")
        );
    }

    #[test]
    fn field_errors_name_the_field() {
        let err = RunConfig::from_yaml_str(MINIMAL, &["self_rag.beam_widht=3".into()], Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("self_rag"), "{err}");
        let err = RunConfig::from_yaml_str(MINIMAL, &["algorithm=flare".into()], Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("algorithm"), "{err}");
        let cfg = RunConfig::from_yaml_str(MINIMAL, &["active_rag.filter_prob=2".into()], Path::new(".")).unwrap();
        assert!(matches!(cfg.prepare(), Err(ConfigError::Invalid { .. })));
        assert!(matches!(parse_override("novalue"), Err(ConfigError::Override(_))));
    }

    #[test]
    fn preset_drives_parameters() {
        let cfg = RunConfig::from_yaml_str(MINIMAL, &["benchmark.preset=arc".into()], Path::new(".")).unwrap();
        let p = cfg.prepare().unwrap();
        assert_eq!(
            (p.params.max_new_tokens, p.n_docs, p.selection.task.as_str()),
            (50, 10, "arc")
        );
        let cfg = RunConfig::from_yaml_str(
            MINIMAL,
            &["benchmark.preset=asqa".into(), "n_docs=3".into()],
            Path::new("."),
        )
        .unwrap();
        let p = cfg.prepare().unwrap();
        assert_eq!((p.params.max_new_tokens, p.n_docs), (300, 3));
        let cfg = RunConfig::from_yaml_str(MINIMAL, &["benchmark.preset=nope".into()], Path::new(".")).unwrap();
        assert!(cfg.prepare().is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = RunConfig::from_yaml_str(MINIMAL, &["benchmark.preset=popqa".into()], Path::new("/b")).unwrap();
        let back: RunConfig = serde_json::from_value(cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }
}
