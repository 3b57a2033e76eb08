//! Uniform generator interface.
//!
//! Algorithms only ever see [`GenerationOutput`]; whether it came from the
//! [`ScriptedGenerator`] or an OpenAI-compatible completion server is
//! invisible to them.

mod openai;
mod pool;
mod scripted;

pub use openai::OpenAiCompletionClient;
pub use pool::{EndpointConfig, EndpointKind, EndpointPool, EndpointPoolConfig, DEFAULT_ROLE};
pub use scripted::{Matcher, ScriptEntry, ScriptFile, ScriptToken, ScriptedGenerator};

use serde::{Deserialize, Serialize};

/// Probability assigned to a candidate token missing from the alternatives.
pub const FLOOR_PROBABILITY: f64 = 1e-10;

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error("generator unreachable after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("generator backend error: {0}")]
    Backend(String),
    #[error("malformed generator response at `{field}`: {message}")]
    Malformed { field: String, message: String },
    #[error("generator capability missing: {0}")]
    Capability(String),
    #[error("no scripted response matches prompt {prompt:?}; closest matchers: {}", nearest.join(", "))]
    NoMatch { prompt: String, nearest: Vec<String> },
    #[error("script registration rejected: {0}")]
    Registration(String),
    #[error("token position {position} out of range (output has {len} tokens)")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("no endpoint assigned to role `{0}`")]
    UnknownRole(String),
    #[error("endpoint configuration error: {0}")]
    Config(String),
}

impl GenError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GenError::Transport { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenParams {
    pub max_new_tokens: u32,
    /// Zero means greedy decoding.
    pub temperature: f64,
    pub seed: u64,
    pub logprobs_top_k: u32,
    pub stop: Vec<String>,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            max_new_tokens: 300,
            temperature: 0.0,
            seed: 42,
            logprobs_top_k: 5,
            stop: Vec::new(),
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.max_new_tokens == 0 {
            return Err(GenError::InvalidParams("max_new_tokens must be positive".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GenError::InvalidParams(
                "temperature must be a finite value >= 0".into(),
            ));
        }
        if self.stop.iter().any(String::is_empty) {
            return Err(GenError::InvalidParams("stop sequences must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alternative {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
    /// Sorted by logprob, highest first.
    #[serde(default)]
    pub top: Vec<Alternative>,
}

impl TokenLogprob {
    pub fn new(token: impl Into<String>, prob: f64) -> Self {
        Self {
            token: token.into(),
            logprob: prob.ln(),
            top: Vec::new(),
        }
    }

    pub fn probability(&self) -> f64 {
        self.logprob.exp()
    }

    /// Replaces the alternatives, given as probabilities.
    pub fn with_alternatives<S: Into<String>>(mut self, alts: impl IntoIterator<Item = (S, f64)>) -> Self {
        self.top = alts
            .into_iter()
            .map(|(t, p)| Alternative {
                token: t.into(),
                logprob: p.ln(),
            })
            .collect();
        sort_alternatives(&mut self.top);
        self
    }
}

pub(crate) fn sort_alternatives(alts: &mut [Alternative]) {
    alts.sort_by(|a, b| b.logprob.total_cmp(&a.logprob).then_with(|| a.token.cmp(&b.token)));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    #[default]
    Stop,
    Length,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub text: String,
    #[serde(default)]
    pub tokens: Vec<TokenLogprob>,
    #[serde(default)]
    pub finish_reason: FinishReason,
}

impl GenerationOutput {
    /// Whitespace-attached tokens (`"a b"` → `["a", " b"]`) at probability 1.
    pub fn from_text(text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = split_pieces(&text)
            .into_iter()
            .map(|t| TokenLogprob::new(t, 1.0))
            .collect();
        Self {
            text,
            tokens,
            finish_reason: FinishReason::Stop,
        }
    }

    /// Output whose text is the concatenation of the given `(token, probability)` pairs.
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = (S, f64)>) -> Self {
        Self::from_logprobs(tokens.into_iter().map(|(t, p)| TokenLogprob::new(t, p)).collect())
    }

    pub fn from_logprobs(tokens: Vec<TokenLogprob>) -> Self {
        let text = tokens.iter().map(|t| t.token.as_str()).collect();
        Self {
            text,
            tokens,
            finish_reason: FinishReason::Stop,
        }
    }

    pub fn with_finish(mut self, reason: FinishReason) -> Self {
        self.finish_reason = reason;
        self
    }

    pub fn token_probabilities(&self) -> Vec<f64> {
        self.tokens.iter().map(TokenLogprob::probability).collect()
    }

    /// True when the token texts concatenate to exactly `text`.
    pub fn is_detokenization_exact(&self) -> bool {
        let mut joined = String::with_capacity(self.text.len());
        for t in &self.tokens {
            joined.push_str(&t.token);
        }
        joined == self.text
    }
}

/// Splits text into pieces that each carry their leading whitespace.
pub fn split_pieces(text: &str) -> Vec<String> {
    let mut pieces = Vec::new();
    let mut current = String::new();
    let mut seen_word = false;
    for c in text.chars() {
        if c.is_whitespace() && seen_word {
            pieces.push(std::mem::take(&mut current));
            seen_word = false;
        }
        if !c.is_whitespace() {
            seen_word = true;
        }
        current.push(c);
    }
    if !current.is_empty() {
        pieces.push(current);
    }
    pieces
}

pub trait Generator: Send + Sync {
    fn complete(&self, prompt: &str, params: &GenParams) -> Result<GenerationOutput, GenError>;

    /// Endpoint identity (backend kind, URL, model) for alignment fingerprints.
    fn describe(&self) -> String;

    fn supports_logprobs(&self) -> bool {
        true
    }
}

impl<G: Generator + ?Sized> Generator for std::sync::Arc<G> {
    fn complete(&self, prompt: &str, params: &GenParams) -> Result<GenerationOutput, GenError> {
        (**self).complete(prompt, params)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }

    fn supports_logprobs(&self) -> bool {
        (**self).supports_logprobs()
    }
}

/// Probability of each candidate token at `position`.
///
/// Looks candidates up among the position's alternatives (and the sampled
/// token itself); anything absent gets [`FLOOR_PROBABILITY`].
pub fn candidate_probability(
    output: &GenerationOutput,
    position: usize,
    candidates: &[&str],
) -> Result<Vec<f64>, GenError> {
    let tok = output.tokens.get(position).ok_or(GenError::PositionOutOfRange {
        position,
        len: output.tokens.len(),
    })?;
    Ok(candidates
        .iter()
        .map(|cand| {
            tok.top
                .iter()
                .find(|a| a.token == *cand)
                .map(|a| a.logprob.exp())
                .or_else(|| (tok.token == *cand).then(|| tok.logprob.exp()))
                .unwrap_or(FLOOR_PROBABILITY)
        })
        .collect())
}

/// Rescales to sum 1; a zero vector becomes uniform.
pub fn normalize_probabilities(probs: &[f64]) -> Vec<f64> {
    let total: f64 = probs.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        let n = probs.len().max(1) as f64;
        return probs.iter().map(|_| 1.0 / n).collect();
    }
    probs.iter().map(|p| p / total).collect()
}

/// Cuts an output at the first stop sequence, then at `max_new_tokens`.
pub fn apply_limits(mut output: GenerationOutput, params: &GenParams) -> GenerationOutput {
    let cut = params.stop.iter().filter_map(|s| output.text.find(s.as_str())).min();
    if let Some(cut) = cut {
        output.text.truncate(cut);
        let mut end = 0usize;
        let mut kept = Vec::new();
        for mut t in std::mem::take(&mut output.tokens) {
            if end >= cut {
                break;
            }
            let len = t.token.len();
            if end + len > cut {
                if !t.token.is_char_boundary(cut - end) {
                    break;
                }
                t.token.truncate(cut - end);
                kept.push(t);
                break;
            }
            end += len;
            kept.push(t);
        }
        output.tokens = kept;
        output.finish_reason = FinishReason::Stop;
    }
    let max = params.max_new_tokens as usize;
    if output.tokens.len() > max {
        output.tokens.truncate(max);
        output.text = output.tokens.iter().map(|t| t.token.as_str()).collect();
        output.finish_reason = FinishReason::Length;
    }
    for t in &mut output.tokens {
        t.top.truncate(params.logprobs_top_k as usize);
    }
    output
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn candidate_probabilities_from_alternatives() {
        let out = GenerationOutput::from_logprobs(vec![
            TokenLogprob::new("yes", 0.7).with_alternatives([("yes", 0.7), ("no", 0.3)])
        ]);
        let p = candidate_probability(&out, 0, &["yes", "no"]).unwrap();
        assert!((p[0] - 0.7).abs() < 1e-12 && (p[1] - 0.3).abs() < 1e-12);
        let p = candidate_probability(&out, 0, &["yes", "maybe"]).unwrap();
        assert_eq!(p[1], FLOOR_PROBABILITY);
        assert!(matches!(
            candidate_probability(&out, 1, &["yes"]),
            Err(GenError::PositionOutOfRange { position: 1, len: 1 })
        ));
    }

    #[test]
    fn sampled_token_counts_when_not_listed() {
        let out = GenerationOutput::from_tokens([("[Relevant]", 0.9)]);
        let p = candidate_probability(&out, 0, &["[Relevant]", "[Irrelevant]"]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-12);
        assert_eq!(p[1], FLOOR_PROBABILITY);
    }

    #[test]
    fn normalize_with_floor() {
        let n = normalize_probabilities(&[0.7, 1e-10]);
        // by hand: 0.7 / 0.7000000001 and 1e-10 / 0.7000000001
        assert!((n[0] - 0.7 / 0.7000000001).abs() < 1e-15);
        assert!((n[1] - 1.0e-10 / 0.7000000001).abs() < 1e-22);
        assert!((n[1] - 1.4285714e-10).abs() < 1e-16);
        assert_eq!(normalize_probabilities(&[0.0, 0.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn pieces_keep_whitespace() {
        assert_eq!(split_pieces("a b  c"), vec!["a", " b", "  c"]);
        assert_eq!(split_pieces(" lead"), vec![" lead"]);
        assert!(split_pieces("").is_empty());
        assert!(GenerationOutput::from_text("Paris is big.").is_detokenization_exact());
    }

    #[test]
    fn limits_stop_then_length() {
        let out = GenerationOutput::from_text("one two three\nfour five");
        let params = GenParams {
            stop: vec!["\n".into()],
            ..GenParams::default()
        };
        let cut = apply_limits(out.clone(), &params);
        assert_eq!(cut.text, "one two three");
        assert!(cut.is_detokenization_exact());
        assert_eq!(cut.finish_reason, FinishReason::Stop);
        let params = GenParams {
            max_new_tokens: 2,
            ..GenParams::default()
        };
        let cut = apply_limits(out, &params);
        assert_eq!(cut.text, "one two");
        assert_eq!(cut.finish_reason, FinishReason::Length);
    }

    #[test]
    fn params_validation() {
        assert!(GenParams::default().validate().is_ok());
        assert!(GenParams {
            max_new_tokens: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(GenParams {
            temperature: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    proptest! {
        #[test]
        fn normalized_candidates_sum_to_one(probs in proptest::collection::vec(0.0f64..=1.0, 1..8), present in proptest::collection::vec(any::<bool>(), 8)) {
            let alts: Vec<(String, f64)> = probs
                .iter()
                .enumerate()
                .filter(|(i, p)| present[*i] && **p > 0.0)
                .map(|(i, p)| (format!("t{i}"), *p))
                .collect();
            let out = GenerationOutput::from_logprobs(vec![TokenLogprob::new("x", 0.5).with_alternatives(alts)]);
            let names: Vec<String> = (0..probs.len()).map(|i| format!("t{i}")).collect();
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let raw = candidate_probability(&out, 0, &refs).unwrap();
            prop_assert!(raw.iter().all(|p| *p > 0.0 && *p <= 1.0));
            let n = normalize_probabilities(&raw);
            prop_assert!((n.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn limits_keep_detokenization_exact(words in proptest::collection::vec("[a-z]{1,4}", 0..30), stop in "[a-z]{1,2}", max in 1u32..40) {
            let out = GenerationOutput::from_text(words.join(" "));
            let params = GenParams { max_new_tokens: max, stop: vec![stop], ..Default::default() };
            let cut = apply_limits(out, &params);
            prop_assert!(cut.is_detokenization_exact());
            prop_assert!(cut.tokens.len() <= max as usize);
        }
    }
}
