//! Direct generation, single-shot RAG, rewrite-retrieve-read and
//! iterative retrieval-generation.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{check_at_least_one, AlgoError, Algorithm, AlgorithmKind, GenerationTrack, InferenceContext};
use crate::corpus::Passage;
use crate::instruction::format_passages;

fn retrieve_noting_empty(
    ctx: &InferenceContext<'_>,
    query: &str,
    track: &mut GenerationTrack,
) -> Result<Vec<Passage>, AlgoError> {
    let passages = ctx.retrieve(query, track)?;
    if passages.is_empty() {
        track.decide("empty_retrieval", json!({ "query": query }), json!(true));
    }
    Ok(passages)
}

/// No retrieval: the question goes straight to the generator.
#[derive(Debug, Clone, Copy, Default)]
pub struct Direct;

impl Algorithm for Direct {
    fn kind(&self) -> AlgorithmKind {
        AlgorithmKind::Direct
    }

    fn stages(&self) -> &'static [&'static str] {
        &["direct"]
    }

    fn infer(&self, ctx: &InferenceContext<'_>, query: &str, track: &mut GenerationTrack) -> Result<String, AlgoError> {
        let prompt = ctx.prompt("direct", &[("query", query)])?;
        Ok(ctx.generate(&prompt, track)?.text.trim().to_string())
    }
}

/// Retrieve once with the question, then answer from the passages.
#[derive(Debug, Clone, Copy, Default)]
pub struct NaiveRag;

impl Algorithm for NaiveRag {
    fn kind(&self) -> AlgorithmKind {
        AlgorithmKind::NaiveRag
    }

    fn stages(&self) -> &'static [&'static str] {
        &["naive_rag"]
    }

    fn infer(&self, ctx: &InferenceContext<'_>, query: &str, track: &mut GenerationTrack) -> Result<String, AlgoError> {
        let passages = retrieve_noting_empty(ctx, query, track)?;
        let block = format_passages(&passages);
        let prompt = ctx.prompt("naive_rag", &[("query", query), ("passages", &block)])?;
        Ok(ctx.generate(&prompt, track)?.text.trim().to_string())
    }
}

/// Rewrite-retrieve-read: the generator first turns the question into a
/// search query.
#[derive(Debug, Clone, Copy, Default)]
pub struct Rrr;

impl Algorithm for Rrr {
    fn kind(&self) -> AlgorithmKind {
        AlgorithmKind::Rrr
    }

    fn stages(&self) -> &'static [&'static str] {
        &["rrr_read", "rrr_rewrite"]
    }

    fn infer(&self, ctx: &InferenceContext<'_>, query: &str, track: &mut GenerationTrack) -> Result<String, AlgoError> {
        let prompt = ctx.prompt("rrr_rewrite", &[("query", query)])?;
        let raw = ctx.generate(&prompt, track)?.text;
        let rewritten = raw.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
        let search = if rewritten.is_empty() {
            track.decide("rewrite_fallback", json!({ "rewrite": raw }), json!(query));
            query
        } else {
            track.decide("rewrite", json!({ "query": query }), json!(rewritten));
            rewritten
        };
        let passages = retrieve_noting_empty(ctx, search, track)?;
        let block = format_passages(&passages);
        let prompt = ctx.prompt("rrr_read", &[("query", query), ("passages", &block)])?;
        Ok(ctx.generate(&prompt, track)?.text.trim().to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterRetgenConfig {
    pub max_iteration: usize,
}

impl Default for IterRetgenConfig {
    fn default() -> Self {
        Self { max_iteration: 3 }
    }
}

impl IterRetgenConfig {
    pub fn validate(&self) -> Result<(), AlgoError> {
        check_at_least_one("iter_retgen.max_iteration", self.max_iteration)
    }
}

/// Alternates retrieval and generation; each retrieval after the first
/// searches with the question followed by the previous answer.
#[derive(Debug, Clone, Default)]
pub struct IterRetgen {
    config: IterRetgenConfig,
}

impl IterRetgen {
    pub fn new(config: IterRetgenConfig) -> Self {
        Self { config }
    }
}

impl Algorithm for IterRetgen {
    fn kind(&self) -> AlgorithmKind {
        AlgorithmKind::IterRetgen
    }

    fn stages(&self) -> &'static [&'static str] {
        &["iter_retgen"]
    }

    fn parameters(&self) -> serde_json::Value {
        json!(self.config)
    }

    fn infer(&self, ctx: &InferenceContext<'_>, query: &str, track: &mut GenerationTrack) -> Result<String, AlgoError> {
        let mut previous: Option<String> = None;
        for _ in 0..self.config.max_iteration {
            let search = match &previous {
                None => query.to_string(),
                Some(p) => format!("{query} {p}"),
            };
            let passages = retrieve_noting_empty(ctx, &search, track)?;
            let block = format_passages(&passages);
            let prompt = ctx.prompt("iter_retgen", &[("query", query), ("passages", &block)])?;
            previous = Some(ctx.generate(&prompt, track)?.text.trim().to_string());
        }
        Ok(previous.unwrap_or_default())
    }
}
