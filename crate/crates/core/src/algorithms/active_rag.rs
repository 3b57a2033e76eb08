//! Forward-looking active retrieval: draft ahead, and retrieve only when a
//! drafted sentence contains a low-confidence token.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::segment::{sentence_segment, DEFAULT_ABBREVIATIONS};
use super::{
    check_at_least_one, check_probability, AlgoError, Algorithm, AlgorithmKind, GenerationTrack, InferenceContext,
};
use crate::generator::{GenerationOutput, TokenLogprob};
use crate::instruction::format_passages;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueryFormulation {
    /// The drafted sentence with its low-probability tokens masked out.
    #[default]
    Implicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActiveRagConfig {
    /// A sentence is accepted when every token has at least this probability.
    pub filter_prob: f64,
    /// Tokens below this probability are dropped from the implicit query.
    pub masked_prob: f64,
    pub query_formulation: QueryFormulation,
    /// Upper bound on look-ahead generations per question.
    pub max_steps: usize,
    pub abbreviations: Vec<String>,
}

impl Default for ActiveRagConfig {
    fn default() -> Self {
        Self {
            filter_prob: 0.8,
            masked_prob: 0.4,
            query_formulation: QueryFormulation::Implicit,
            max_steps: 32,
            abbreviations: DEFAULT_ABBREVIATIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl ActiveRagConfig {
    pub fn validate(&self) -> Result<(), AlgoError> {
        check_probability("active_rag.filter_prob", self.filter_prob)?;
        check_probability("active_rag.masked_prob", self.masked_prob)?;
        check_at_least_one("active_rag.max_steps", self.max_steps)
    }
}

/// Concatenates the tokens with probability at least `masked_prob` and
/// collapses the whitespace.
pub fn implicit_query(tokens: &[&TokenLogprob], masked_prob: f64) -> String {
    let kept: String = tokens
        .iter()
        .filter(|t| t.probability() >= masked_prob)
        .map(|t| t.token.as_str())
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

struct Sentence<'a> {
    text: String,
    tokens: Vec<&'a TokenLogprob>,
}

impl Sentence<'_> {
    fn min_prob(&self) -> f64 {
        self.tokens.iter().map(|t| t.probability()).fold(1.0, f64::min)
    }
}

/// Sentences of `output` with every token that overlaps each one.
fn sentences<'a>(output: &'a GenerationOutput, abbreviations: &[String]) -> Vec<Sentence<'a>> {
    let mut spans = Vec::with_capacity(output.tokens.len());
    let mut at = 0usize;
    for t in &output.tokens {
        spans.push((at, at + t.token.len(), t));
        at += t.token.len();
    }
    let mut start = 0usize;
    sentence_segment(&output.text, abbreviations)
        .into_iter()
        .map(|text| {
            let end = start + text.len();
            let tokens = spans
                .iter()
                .filter(|(s, e, _)| *s < end && *e > start)
                .map(|(_, _, t)| *t)
                .collect();
            start = end;
            Sentence { text, tokens }
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct ActiveRag {
    config: ActiveRagConfig,
}

impl ActiveRag {
    pub fn new(config: ActiveRagConfig) -> Self {
        Self { config }
    }

    fn generate_checked(
        &self,
        ctx: &InferenceContext<'_>,
        prompt: &str,
        track: &mut GenerationTrack,
    ) -> Result<GenerationOutput, AlgoError> {
        let out = ctx.generate(prompt, track)?;
        if out.tokens.is_empty() && !out.text.trim().is_empty() {
            return Err(AlgoError::Capability(
                "active retrieval needs per-token probabilities but the generator returned none".into(),
            ));
        }
        Ok(out)
    }
}

impl Algorithm for ActiveRag {
    fn kind(&self) -> AlgorithmKind {
        AlgorithmKind::ActiveRag
    }

    fn stages(&self) -> &'static [&'static str] {
        &["active_rag", "active_rag_grounded"]
    }

    fn parameters(&self) -> serde_json::Value {
        json!(self.config)
    }

    fn init(&self, ctx: &InferenceContext<'_>) -> Result<(), AlgoError> {
        if !ctx.generator.supports_logprobs() {
            return Err(AlgoError::Capability(format!(
                "active retrieval needs token probabilities; {} does not provide them",
                ctx.generator.describe()
            )));
        }
        if ctx.params.logprobs_top_k == 0 {
            return Err(AlgoError::Capability(
                "active retrieval needs token probabilities; set generation.logprobs_top_k >= 1".into(),
            ));
        }
        Ok(())
    }

    fn infer(&self, ctx: &InferenceContext<'_>, query: &str, track: &mut GenerationTrack) -> Result<String, AlgoError> {
        let c = &self.config;
        let max_tokens = ctx.params.max_new_tokens as usize;
        let mut answer = String::new();
        let mut used_tokens = 0usize;
        for _ in 0..c.max_steps {
            let prompt = ctx.prompt("active_rag", &[("query", query), ("partial", &answer)])?;
            let draft = self.generate_checked(ctx, &prompt, track)?;
            let mut done = true;
            for sentence in sentences(&draft, &c.abbreviations) {
                if sentence.text.trim().is_empty() {
                    continue;
                }
                let min_prob = sentence.min_prob();
                let low = min_prob < c.filter_prob;
                track.decide(
                    "sentence_confidence",
                    json!({ "sentence": sentence.text, "min_prob": min_prob, "filter_prob": c.filter_prob }),
                    json!(if low { "retrieve" } else { "accept" }),
                );
                if !low {
                    answer.push_str(&sentence.text);
                    used_tokens += sentence.tokens.len();
                    continue;
                }
                let mut search = implicit_query(&sentence.tokens, c.masked_prob);
                if search.is_empty() {
                    track.decide(
                        "empty_implicit_query",
                        json!({ "sentence": sentence.text }),
                        json!(query),
                    );
                    search = query.to_string();
                }
                let passages = ctx.retrieve(&search, track)?;
                let block = format_passages(&passages);
                let prompt = ctx.prompt(
                    "active_rag_grounded",
                    &[("passages", &block), ("query", query), ("partial", &answer)],
                )?;
                let regenerated = self.generate_checked(ctx, &prompt, track)?;
                let parts: Vec<Sentence<'_>> = sentences(&regenerated, &c.abbreviations)
                    .into_iter()
                    .filter(|s| !s.text.trim().is_empty())
                    .collect();
                if let Some(first) = parts.first() {
                    // Leading whitespace from the draft keeps sentences apart.
                    if !answer.is_empty() && !first.text.starts_with(char::is_whitespace) {
                        answer.push(' ');
                    }
                    answer.push_str(&first.text);
                    used_tokens += first.tokens.len();
                }
                done = parts.len() <= 1;
                break;
            }
            if done {
                return Ok(answer.trim().to_string());
            }
            if used_tokens >= max_tokens {
                track.decide("length_limit", json!({ "tokens": used_tokens }), json!(max_tokens));
                return Ok(answer.trim().to_string());
            }
        }
        track.decide("step_limit", json!({ "max_steps": c.max_steps }), json!(true));
        Ok(answer.trim().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masking_drops_only_low_tokens() {
        let toks = [
            TokenLogprob::new("Paris", 0.95),
            TokenLogprob::new(" hosted", 0.35),
            TokenLogprob::new(" games", 0.7),
        ];
        let refs: Vec<&TokenLogprob> = toks.iter().collect();
        assert_eq!(implicit_query(&refs, 0.4), "Paris games");
        assert_eq!(implicit_query(&refs, 0.99), "");
    }

    #[test]
    fn tokens_assigned_to_overlapping_sentences() {
        let out = GenerationOutput::from_tokens([("A", 0.9), (".", 0.5), (" B", 0.7), ("?", 0.99)]);
        let s = sentences(&out, &[]);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].text, "A.");
        assert_eq!(s[0].min_prob(), 0.5_f64.ln().exp());
        assert_eq!(s[1].tokens.len(), 2);
    }
}
