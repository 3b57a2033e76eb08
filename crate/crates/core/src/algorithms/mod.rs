//! Inference strategies over one retriever and one generator.
//!
//! Each strategy implements [`Algorithm`]: an optional `init` check that runs
//! before any backend call, and `infer`, which records every retrieval,
//! generation and control decision into a [`GenerationTrack`]. Adding a new
//! strategy means implementing that trait; prompts, retrieval and generation
//! go through [`InferenceContext`] so they stay aligned with the others.

mod active_rag;
mod basic;
pub mod segment;
mod self_ask;
mod self_rag;
pub mod track;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use active_rag::{implicit_query, ActiveRag, ActiveRagConfig, QueryFormulation};
pub use basic::{Direct, IterRetgen, IterRetgenConfig, NaiveRag, Rrr};
pub use segment::{sentence_segment, DEFAULT_ABBREVIATIONS};
pub use self_ask::{SelfAsk, SelfAskConfig};
pub use self_rag::{critique_score, SelfRag, SelfRagConfig, SelfRagMode, SelfRagVocabulary};
pub use track::{GenerationTrack, Step, TrackSummary};

use crate::corpus::Passage;
use crate::generator::{GenError, GenParams, GenerationOutput, Generator};
use crate::instruction::{Bindings, InstructionError, InstructionStore, PromptAssembly};
use crate::retriever::{RetrievalError, Retriever};

#[derive(Debug, thiserror::Error)]
pub enum AlgoError {
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Generation(#[from] GenError),
    #[error(transparent)]
    Instruction(#[from] InstructionError),
    #[error("{0}")]
    Capability(String),
    #[error("invalid algorithm configuration: {0}")]
    Config(String),
}

/// An error together with everything recorded before it happened.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct InferenceFailure {
    #[source]
    pub error: AlgoError,
    pub track: GenerationTrack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub answer: String,
    pub track: GenerationTrack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    Direct,
    NaiveRag,
    Rrr,
    IterRetgen,
    SelfAsk,
    ActiveRag,
    SelfRag,
}

impl AlgorithmKind {
    pub const ALL: [AlgorithmKind; 7] = [
        AlgorithmKind::Direct,
        AlgorithmKind::NaiveRag,
        AlgorithmKind::Rrr,
        AlgorithmKind::IterRetgen,
        AlgorithmKind::SelfAsk,
        AlgorithmKind::ActiveRag,
        AlgorithmKind::SelfRag,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlgorithmKind::Direct => "direct",
            AlgorithmKind::NaiveRag => "naive_rag",
            AlgorithmKind::Rrr => "rrr",
            AlgorithmKind::IterRetgen => "iter_retgen",
            AlgorithmKind::SelfAsk => "self_ask",
            AlgorithmKind::ActiveRag => "active_rag",
            AlgorithmKind::SelfRag => "self_rag",
        }
    }
}

impl fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlgorithmKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            format!(
                "unknown algorithm `{s}` (expected one of {})",
                Self::ALL.map(AlgorithmKind::name).join(", ")
            )
        })
    }
}

/// Per-algorithm parameters; only the selected algorithm's section is used.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub iter_retgen: IterRetgenConfig,
    pub self_ask: SelfAskConfig,
    pub active_rag: ActiveRagConfig,
    pub self_rag: SelfRagConfig,
}

impl AlgorithmConfig {
    pub fn validate(&self) -> Result<(), AlgoError> {
        self.iter_retgen.validate()?;
        self.self_ask.validate()?;
        self.active_rag.validate()?;
        self.self_rag.validate()
    }

    pub fn build(&self, kind: AlgorithmKind) -> Box<dyn Algorithm> {
        match kind {
            AlgorithmKind::Direct => Box::new(Direct),
            AlgorithmKind::NaiveRag => Box::new(NaiveRag),
            AlgorithmKind::Rrr => Box::new(Rrr),
            AlgorithmKind::IterRetgen => Box::new(IterRetgen::new(self.iter_retgen.clone())),
            AlgorithmKind::SelfAsk => Box::new(SelfAsk::new(self.self_ask.clone())),
            AlgorithmKind::ActiveRag => Box::new(ActiveRag::new(self.active_rag.clone())),
            AlgorithmKind::SelfRag => Box::new(SelfRag::new(self.self_rag.clone())),
        }
    }
}

pub(crate) fn check_probability(name: &str, v: f64) -> Result<(), AlgoError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(AlgoError::Config(format!("{name} must lie in [0, 1], got {v}")))
    }
}

pub(crate) fn check_at_least_one(name: &str, v: usize) -> Result<(), AlgoError> {
    if v >= 1 {
        Ok(())
    } else {
        Err(AlgoError::Config(format!("{name} must be at least 1")))
    }
}

pub trait Algorithm: Send + Sync {
    fn kind(&self) -> AlgorithmKind;

    /// Algorithm-pool templates this strategy renders, main one first.
    fn stages(&self) -> &'static [&'static str];

    /// Parameters that shape control flow, for run fingerprints.
    fn parameters(&self) -> serde_json::Value {
        json!({})
    }

    /// Capability checks; runs before any backend call.
    fn init(&self, _ctx: &InferenceContext<'_>) -> Result<(), AlgoError> {
        Ok(())
    }

    fn infer(&self, ctx: &InferenceContext<'_>, query: &str, track: &mut GenerationTrack) -> Result<String, AlgoError>;
}

/// Which templates to combine: one system, one task, and per-stage
/// algorithm overrides (a stage without an override uses the template of
/// the same name).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSelection {
    pub system: String,
    pub task: String,
    #[serde(default)]
    pub algorithm: BTreeMap<String, String>,
}

impl InstructionSelection {
    pub fn new(system: impl Into<String>, task: impl Into<String>) -> Self {
        Self {
            system: system.into(),
            task: task.into(),
            algorithm: BTreeMap::new(),
        }
    }

    pub fn with_stage(mut self, stage: impl Into<String>, template: impl Into<String>) -> Self {
        self.algorithm.insert(stage.into(), template.into());
        self
    }

    pub fn template_for<'a>(&'a self, stage: &'a str) -> &'a str {
        self.algorithm.get(stage).map_or(stage, String::as_str)
    }
}

/// Everything an inference reads; shared by all strategies in a run.
pub struct InferenceContext<'a> {
    pub retriever: &'a dyn Retriever,
    pub generator: &'a dyn Generator,
    pub instructions: &'a InstructionStore,
    pub selection: &'a InstructionSelection,
    pub params: &'a GenParams,
    pub n_docs: usize,
    /// Extra per-item bindings, e.g. formatted `choices`.
    pub bindings: Bindings,
}

impl<'a> InferenceContext<'a> {
    pub fn new(
        retriever: &'a dyn Retriever,
        generator: &'a dyn Generator,
        instructions: &'a InstructionStore,
        selection: &'a InstructionSelection,
        params: &'a GenParams,
        n_docs: usize,
    ) -> Self {
        Self {
            retriever,
            generator,
            instructions,
            selection,
            params,
            n_docs,
            bindings: Bindings::new(),
        }
    }

    pub fn with_bindings(mut self, bindings: Bindings) -> Self {
        self.bindings = bindings;
        self
    }

    /// Renders the full prompt for an algorithm stage.
    pub fn prompt(&self, stage: &str, values: &[(&str, &str)]) -> Result<String, AlgoError> {
        let mut bindings = self.bindings.clone();
        for (k, v) in values {
            bindings.insert((*k).to_string(), (*v).to_string());
        }
        Ok(self.instructions.render(&PromptAssembly {
            system: self.selection.system.clone(),
            task: self.selection.task.clone(),
            algorithm: self.selection.template_for(stage).to_string(),
            bindings,
        })?)
    }

    pub fn retrieve(&self, query: &str, track: &mut GenerationTrack) -> Result<Vec<Passage>, AlgoError> {
        let got = self.retriever.retrieve(query, self.n_docs)?;
        track.push(Step::Retrieval {
            query: query.to_string(),
            k: self.n_docs,
            passages: got.passages.clone(),
            cache_hit: got.cache_hit,
        });
        Ok(got.passages)
    }

    pub fn generate(&self, prompt: &str, track: &mut GenerationTrack) -> Result<GenerationOutput, AlgoError> {
        self.generate_with(prompt, self.params, track)
    }

    pub fn generate_with(
        &self,
        prompt: &str,
        params: &GenParams,
        track: &mut GenerationTrack,
    ) -> Result<GenerationOutput, AlgoError> {
        let output = self.generator.complete(prompt, params)?;
        track.push(Step::Generation {
            prompt: prompt.to_string(),
            output: output.clone(),
        });
        Ok(output)
    }
}

/// Runs `init` then `infer`, returning the partial track on failure.
pub fn run_inference(
    algorithm: &dyn Algorithm,
    ctx: &InferenceContext<'_>,
    query: &str,
) -> Result<Inference, InferenceFailure> {
    let mut track = GenerationTrack::new();
    let result = algorithm
        .init(ctx)
        .and_then(|()| algorithm.infer(ctx, query, &mut track));
    match result {
        Ok(answer) => {
            track.answer = Some(answer.clone());
            Ok(Inference { answer, track })
        }
        Err(error) => Err(InferenceFailure { error, track }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_round_trip() {
        for k in AlgorithmKind::ALL {
            assert_eq!(k.name().parse::<AlgorithmKind>().unwrap(), k);
            assert_eq!(serde_json::to_value(k).unwrap(), k.name());
        }
        assert!("flare".parse::<AlgorithmKind>().is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = AlgorithmConfig::default();
        assert_eq!(cfg.iter_retgen.max_iteration, 3);
        assert_eq!(cfg.self_ask.max_iteration, 5);
        assert_eq!((cfg.active_rag.filter_prob, cfg.active_rag.masked_prob), (0.8, 0.4));
        let s = &cfg.self_rag;
        assert_eq!((s.beam_width, s.max_depth), (2, 7));
        assert_eq!((s.w_rel, s.w_sup, s.w_use, s.threshold), (1.0, 1.0, 0.5, 0.2));
        cfg.validate().unwrap();

        let mut bad = cfg.clone();
        bad.active_rag.filter_prob = 1.5;
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.self_rag.beam_width = 0;
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.iter_retgen.max_iteration = 0;
        assert!(bad.validate().is_err());
        let yaml = "self_rag: {mode: sometimes}";
        assert!(serde_yaml::from_str::<AlgorithmConfig>(yaml).is_err());
    }

    #[test]
    fn stage_overrides() {
        let sel = InstructionSelection::new("default", "popqa").with_stage("naive_rag", "mine");
        assert_eq!(sel.template_for("naive_rag"), "mine");
        assert_eq!(sel.template_for("direct"), "direct");
    }
}
