//! A configured run: one algorithm bound to its retriever and generator,
//! used either interactively or over a benchmark.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;
use serde_json::Value as Json;

use crate::algorithms::{run_inference, Algorithm, Inference, InferenceContext, InferenceFailure};
use crate::config::{ConfigError, PreparedConfig, RetrieverConfig, RunConfig};
use crate::error::Error;
use crate::eval::{
    aggregate_tables, check_alignment, evaluate_run, fingerprint, load_dataset, sample_sequential,
    AlignmentFingerprint, BenchmarkItem, EvalReport, EvalSettings, Metric, RunComponents,
};
use crate::generator::{EndpointPool, Generator};
use crate::index::InvertedIndex;
use crate::retriever::Retriever;
use crate::service::client::RetrievalClient;
use crate::service::{RetrievalService, ServiceOptions};

pub const COMPARISON_TSV: &str = "comparison.tsv";
pub const COMPARISON_TXT: &str = "comparison.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Interact,
    Evaluation,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "interact" => Ok(Mode::Interact),
            "evaluation" => Ok(Mode::Evaluation),
            other => Err(Error::Usage(format!(
                "unknown mode `{other}` (expected interact or evaluation)"
            ))),
        }
    }
}

#[derive(Debug)]
pub enum Outcome {
    Answer(Inference),
    Report(Box<EvalReport>),
}

pub type OpenedRetriever = (Arc<dyn Retriever>, Option<Arc<RetrievalService>>);

/// The retriever a config names, plus the cached service behind it when
/// the index is local (so the caller can persist its cache).
pub fn open_retriever(cfg: &RetrieverConfig) -> Result<OpenedRetriever, Error> {
    match (&cfg.index, &cfg.endpoint) {
        (Some(path), _) => {
            let index = Arc::new(InvertedIndex::load(path)?);
            let service = Arc::new(RetrievalService::open(
                index,
                ServiceOptions {
                    cache_path: cfg.cache.clone(),
                    max_entries: cfg.max_cache_entries,
                },
            ));
            for w in service.warnings() {
                log::warn!("{w}");
            }
            Ok((service.clone(), Some(service)))
        }
        (None, Some(endpoint)) => Ok((Arc::new(RetrievalClient::new(endpoint.clone())), None)),
        (None, None) => Err(ConfigError::Invalid {
            field: "retriever".into(),
            reason: "set `index` or `endpoint`".into(),
        }
        .into()),
    }
}

pub struct Rag {
    prepared: PreparedConfig,
    algorithm: Box<dyn Algorithm>,
    retriever: Arc<dyn Retriever>,
    generator: Arc<dyn Generator>,
    service: Option<Arc<RetrievalService>>,
}

impl Rag {
    pub fn from_config(config: &RunConfig) -> Result<Self, Error> {
        let prepared = config.prepare()?;
        let (retriever, service) = open_retriever(&config.retriever)?;
        let pool = EndpointPool::from_config(&config.generator, Path::new("."))?;
        let generator = pool.resolve(config.algorithm.name())?;
        let mut rag = Self::with_backends(prepared, retriever, generator);
        rag.service = service;
        Ok(rag)
    }

    /// Binds an already-validated config to explicit backends.
    pub fn with_backends(
        prepared: PreparedConfig,
        retriever: Arc<dyn Retriever>,
        generator: Arc<dyn Generator>,
    ) -> Self {
        let algorithm = prepared.config.algorithm_config().build(prepared.config.algorithm);
        Self {
            prepared,
            algorithm,
            retriever,
            generator,
            service: None,
        }
    }

    pub fn prepared(&self) -> &PreparedConfig {
        &self.prepared
    }

    pub fn components(&self) -> RunComponents<'_> {
        RunComponents {
            algorithm: self.algorithm.as_ref(),
            retriever: self.retriever.as_ref(),
            generator: self.generator.as_ref(),
            instructions: &self.prepared.instructions,
            selection: &self.prepared.selection,
            params: &self.prepared.params,
            n_docs: self.prepared.n_docs,
        }
    }

    /// `interact` answers `query`; `evaluation` runs the configured benchmark.
    pub fn inference(&self, query: Option<&str>, mode: &str) -> Result<Outcome, Error> {
        match mode.parse::<Mode>()? {
            Mode::Interact => {
                let query = query.ok_or_else(|| Error::Usage("interact mode needs a query".into()))?;
                self.interact(query).map(Outcome::Answer).map_err(|f| f.error.into())
            }
            Mode::Evaluation => self.evaluate().map(|r| Outcome::Report(Box::new(r))),
        }
    }

    pub fn interact(&self, query: &str) -> Result<Inference, InferenceFailure> {
        let ctx = InferenceContext::new(
            self.retriever.as_ref(),
            self.generator.as_ref(),
            &self.prepared.instructions,
            &self.prepared.selection,
            &self.prepared.params,
            self.prepared.n_docs,
        );
        run_inference(self.algorithm.as_ref(), &ctx, query)
    }

    /// The sampled benchmark items and the harness settings for this run.
    pub fn evaluation_inputs(&self) -> Result<(Vec<BenchmarkItem>, EvalSettings), Error> {
        let cfg = &self.prepared.config;
        let (name, preset) = self
            .prepared
            .benchmark
            .as_ref()
            .ok_or_else(|| Error::Usage("evaluation mode needs a `benchmark` section".into()))?;
        let path = cfg
            .benchmark
            .as_ref()
            .and_then(|b| b.dataset.as_ref())
            .ok_or_else(|| Error::Usage("evaluation mode needs `benchmark.dataset`".into()))?;
        let items = sample_sequential(&load_dataset(path, &preset.keymap)?, cfg.sample_size);
        let run_id = format!("{name}-{}", cfg.algorithm.name());
        let settings = EvalSettings {
            output_dir: Some(cfg.output_dir.join(&run_id)),
            run_id,
            benchmark: name.clone(),
            metrics: preset.metrics.clone(),
            seed: cfg.seed,
            parallelism: cfg.parallelism,
            effective_config: cfg.to_json(),
        };
        Ok((items, settings))
    }

    pub fn evaluate(&self) -> Result<EvalReport, Error> {
        let (items, settings) = self.evaluation_inputs()?;
        Ok(evaluate_run(&self.components(), &items, &settings)?)
    }

    /// Flushes the local retrieval cache, if any.
    pub fn persist_cache(&self) -> Result<(), Error> {
        match &self.service {
            Some(s) => s.persist().map_err(|source| Error::Io {
                path: self
                    .prepared
                    .config
                    .retriever
                    .cache
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
                source,
            }),
            None => Ok(()),
        }
    }
}

/// One entry of a batch file: an algorithm name, or an algorithm with
/// extra `--set`-style overrides.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum BatchRun {
    Name(String),
    Detailed {
        algorithm: String,
        #[serde(default)]
        id: Option<String>,
        #[serde(default)]
        set: BTreeMap<String, serde_yaml::Value>,
    },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchFile {
    pub runs: Vec<BatchRun>,
}

impl BatchFile {
    pub fn from_yaml_str(yaml: &str) -> Result<Self, ConfigError> {
        let value: serde_yaml::Value = serde_yaml::from_str(yaml).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        serde_path_to_error::deserialize(value).map_err(|e| ConfigError::Field {
            field: format!("batch.{}", e.path()),
            message: e.into_inner().to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_yaml_str(&text)
    }

    /// Each run's full config, derived from `base`.
    pub fn expand(&self, base: &RunConfig) -> Result<Vec<(Option<String>, RunConfig)>, ConfigError> {
        self.runs
            .iter()
            .map(|run| {
                let (algorithm, id, set) = match run {
                    BatchRun::Name(n) => (n.clone(), None, BTreeMap::new()),
                    BatchRun::Detailed { algorithm, id, set } => (algorithm.clone(), id.clone(), set.clone()),
                };
                let mut overrides = vec![("algorithm".to_string(), serde_yaml::Value::String(algorithm))];
                overrides.extend(set);
                Ok((id, base.with_overrides(&overrides)?))
            })
            .collect()
    }
}

pub struct BatchOutcome {
    pub reports: Vec<EvalReport>,
    pub tsv: String,
    pub text: String,
}

/// Builds every run of a batch, shares identical retrievers and generator
/// pools between them, and refuses to start unless every run agrees on the
/// shared components.
pub fn run_batch(base: &RunConfig, batch: &BatchFile) -> Result<BatchOutcome, Error> {
    if batch.runs.is_empty() {
        return Err(Error::Usage("batch file lists no runs".into()));
    }
    let expanded = batch.expand(base)?;
    let mut prepared = Vec::with_capacity(expanded.len());
    for (id, cfg) in expanded {
        prepared.push((id, cfg.prepare()?));
    }
    let mut retrievers: HashMap<String, OpenedRetriever> = HashMap::new();
    let mut pools: HashMap<String, Arc<EndpointPool>> = HashMap::new();
    let mut rags = Vec::with_capacity(prepared.len());
    for (id, p) in prepared {
        let rkey = serde_json::to_string(&p.config.retriever).expect("serializes");
        let (retriever, service) = match retrievers.get(&rkey) {
            Some(r) => r.clone(),
            None => {
                let r = open_retriever(&p.config.retriever)?;
                retrievers.insert(rkey, r.clone());
                r
            }
        };
        let gkey = serde_json::to_string(&p.config.generator).expect("serializes");
        let pool = match pools.get(&gkey) {
            Some(pool) => pool.clone(),
            None => {
                let pool = Arc::new(EndpointPool::from_config(&p.config.generator, Path::new("."))?);
                pools.insert(gkey, pool.clone());
                pool
            }
        };
        let generator = pool.resolve(p.config.algorithm.name())?;
        let mut rag = Rag::with_backends(p, retriever, generator);
        rag.service = service;
        rags.push((id, rag));
    }
    run_prepared_batch(&rags, &base.output_dir)
}

/// Aligns and evaluates already-built runs, writing the comparison tables
/// into `output_dir`.
pub fn run_prepared_batch(rags: &[(Option<String>, Rag)], output_dir: &Path) -> Result<BatchOutcome, Error> {
    let mut inputs = Vec::with_capacity(rags.len());
    let mut fingerprints: Vec<(String, AlignmentFingerprint)> = Vec::with_capacity(rags.len());
    for (id, rag) in rags {
        let (items, mut settings) = rag.evaluation_inputs()?;
        if let Some(id) = id {
            settings.output_dir = Some(rag.prepared.config.output_dir.join(id));
            settings.run_id = id.clone();
        }
        if fingerprints.iter().any(|(seen, _)| *seen == settings.run_id) {
            return Err(Error::Usage(format!(
                "batch runs share the id `{}`; give them distinct `id` fields",
                settings.run_id
            )));
        }
        fingerprints.push((
            settings.run_id.clone(),
            fingerprint(&rag.components(), &items, &settings)?,
        ));
        inputs.push((items, settings));
    }
    check_alignment(&fingerprints)?;
    let mut reports = Vec::with_capacity(rags.len());
    for ((_, rag), (items, settings)) in rags.iter().zip(&inputs) {
        log::info!("running {}", settings.run_id);
        reports.push(evaluate_run(&rag.components(), items, settings)?);
        rag.persist_cache()?;
    }
    let mut metrics: Vec<Metric> = Vec::new();
    for (_, s) in &inputs {
        for m in &s.metrics {
            if !metrics.contains(m) {
                metrics.push(*m);
            }
        }
    }
    let (tsv, text) = aggregate_tables(&reports, &metrics);
    std::fs::create_dir_all(output_dir).map_err(|source| Error::Io {
        path: output_dir.display().to_string(),
        source,
    })?;
    for (name, body) in [(COMPARISON_TSV, &tsv), (COMPARISON_TXT, &text)] {
        let path = output_dir.join(name);
        std::fs::write(&path, body).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(BatchOutcome { reports, tsv, text })
}

/// The config echoed into a report, typed again.
pub fn config_from_report(config: &Json) -> Result<RunConfig, ConfigError> {
    let value: serde_yaml::Value = serde_yaml::to_value(config).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    RunConfig::from_value(value)
}
