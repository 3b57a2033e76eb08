//! Self-reflective retrieval: segment-wise generation scored by reflection
//! tokens, with a small beam over candidate continuations.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    check_at_least_one, check_probability, AlgoError, Algorithm, AlgorithmKind, GenerationTrack, InferenceContext,
};
use crate::corpus::Passage;
use crate::generator::{candidate_probability, normalize_probabilities, GenerationOutput, FLOOR_PROBABILITY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelfRagMode {
    /// Retrieve at every segment.
    Always,
    /// Retrieve when the model's retrieval token is likely enough.
    #[default]
    Adaptive,
    /// Never retrieve; one plain generation.
    No,
}

/// Reflection token spellings; served models may tokenize them differently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfRagVocabulary {
    pub retrieval: String,
    pub no_retrieval: String,
    pub relevant: String,
    pub irrelevant: String,
    pub fully_supported: String,
    pub partially_supported: String,
    pub no_support: String,
    /// Lowest grade first.
    pub utility: Vec<String>,
    pub paragraph_open: String,
    pub paragraph_close: String,
    pub end: String,
}

impl Default for SelfRagVocabulary {
    fn default() -> Self {
        Self {
            retrieval: "[Retrieval]".into(),
            no_retrieval: "[No Retrieval]".into(),
            relevant: "[Relevant]".into(),
            irrelevant: "[Irrelevant]".into(),
            fully_supported: "[Fully supported]".into(),
            partially_supported: "[Partially supported]".into(),
            no_support: "[No support / Contradictory]".into(),
            utility: (1..=5).map(|g| format!("[Utility:{g}]")).collect(),
            paragraph_open: "<paragraph>".into(),
            paragraph_close: "</paragraph>".into(),
            end: "</s>".into(),
        }
    }
}

impl SelfRagVocabulary {
    pub fn all_tokens(&self) -> Vec<&str> {
        let mut v = vec![
            self.retrieval.as_str(),
            self.no_retrieval.as_str(),
            self.relevant.as_str(),
            self.irrelevant.as_str(),
            self.fully_supported.as_str(),
            self.partially_supported.as_str(),
            self.no_support.as_str(),
            self.paragraph_open.as_str(),
            self.paragraph_close.as_str(),
            self.end.as_str(),
        ];
        v.extend(self.utility.iter().map(String::as_str));
        v
    }

    /// Removes every reflection token and any retrieved paragraph echoed by
    /// the model.
    pub fn strip(&self, text: &str) -> String {
        let mut out = text.to_string();
        while let Some(open) = out.find(&self.paragraph_open) {
            match out[open..].find(&self.paragraph_close) {
                Some(close) => out.replace_range(open..open + close + self.paragraph_close.len(), ""),
                None => break,
            }
        }
        for t in self.all_tokens() {
            if !t.is_empty() {
                out = out.replace(t, "");
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfRagConfig {
    pub beam_width: usize,
    /// Segments per answer, the first one included.
    pub max_depth: usize,
    pub w_rel: f64,
    pub w_sup: f64,
    pub w_use: f64,
    /// Adaptive mode retrieves when p(retrieve) exceeds this.
    pub threshold: f64,
    pub mode: SelfRagMode,
    pub vocabulary: SelfRagVocabulary,
}

impl Default for SelfRagConfig {
    fn default() -> Self {
        Self {
            beam_width: 2,
            max_depth: 7,
            w_rel: 1.0,
            w_sup: 1.0,
            w_use: 0.5,
            threshold: 0.2,
            mode: SelfRagMode::Adaptive,
            vocabulary: SelfRagVocabulary::default(),
        }
    }
}

impl SelfRagConfig {
    pub fn validate(&self) -> Result<(), AlgoError> {
        check_at_least_one("self_rag.beam_width", self.beam_width)?;
        check_at_least_one("self_rag.max_depth", self.max_depth)?;
        check_probability("self_rag.threshold", self.threshold)?;
        for (name, w) in [("w_rel", self.w_rel), ("w_sup", self.w_sup), ("w_use", self.w_use)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(AlgoError::Config(format!(
                    "self_rag.{name} must be a finite value >= 0"
                )));
            }
        }
        if self.vocabulary.utility.len() < 2 {
            return Err(AlgoError::Config(
                "self_rag.vocabulary.utility needs at least two grades".into(),
            ));
        }
        Ok(())
    }
}

/// `w_rel·p_rel + w_sup·p_sup + w_use·p_use`, where `support` is the
/// distribution over (fully, partially, not supported) mapped to 1, 0.5, 0,
/// and `utility` is the distribution over grades (lowest first) whose
/// expectation is rescaled to [0, 1].
pub fn critique_score(config: &SelfRagConfig, p_rel: f64, support: [f64; 3], utility: &[f64]) -> f64 {
    let p_sup = support[0] + 0.5 * support[1];
    config.w_rel * p_rel + config.w_sup * p_sup + config.w_use * expected_utility(utility)
}

fn expected_utility(utility: &[f64]) -> f64 {
    let top = (utility.len().max(2) - 1) as f64;
    utility.iter().enumerate().map(|(g, p)| p * g as f64 / top).sum()
}

/// Normalized probabilities of `group` at the first position that samples
/// one of its tokens (or, failing that, lists one as an alternative).
/// `None` when no position mentions the group; callers fall back to floor
/// probabilities, which normalize to uniform.
fn group_distribution(output: &GenerationOutput, group: &[&str]) -> Option<Vec<f64>> {
    let position = output
        .tokens
        .iter()
        .position(|t| group.contains(&t.token.as_str()))
        .or_else(|| {
            output
                .tokens
                .iter()
                .position(|t| t.top.iter().any(|a| group.contains(&a.token.as_str())))
        })?;
    let raw = candidate_probability(output, position, group).ok()?;
    Some(normalize_probabilities(&raw))
}

fn floor_distribution(n: usize) -> Vec<f64> {
    normalize_probabilities(&vec![FLOOR_PROBABILITY; n])
}

#[derive(Debug, Clone)]
struct Beam {
    text: String,
    last_segment: String,
    score: f64,
    path: Vec<Option<u32>>,
    order: usize,
    done: bool,
}

impl Beam {
    fn extend(&self, segment: &str, score: f64, passage: Option<u32>, order: usize, ended: bool) -> Beam {
        let segment = segment.trim();
        let mut text = self.text.clone();
        if !text.is_empty() && !segment.is_empty() {
            text.push(' ');
        }
        text.push_str(segment);
        let mut path = self.path.clone();
        path.push(passage);
        Beam {
            text,
            last_segment: segment.to_string(),
            score: self.score + score,
            path,
            order,
            done: ended || segment.is_empty(),
        }
    }
}

/// Higher score first; ties go to lower passage ids along the path, then to
/// the earlier-generated candidate.
fn beam_order(a: &Beam, b: &Beam) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| {
            let key = |p: &Option<u32>| p.map_or(u64::MAX, u64::from);
            a.path.iter().map(key).cmp(b.path.iter().map(key))
        })
        .then_with(|| a.order.cmp(&b.order))
}

#[derive(Debug, Clone, Default)]
pub struct SelfRag {
    config: SelfRagConfig,
}

impl SelfRag {
    pub fn new(config: SelfRagConfig) -> Self {
        Self { config }
    }

    fn vocab(&self) -> &SelfRagVocabulary {
        &self.config.vocabulary
    }

    fn distribution(&self, out: &GenerationOutput, group: &[&str], name: &str, degraded: &mut Vec<String>) -> Vec<f64> {
        group_distribution(out, group).unwrap_or_else(|| {
            degraded.push(name.to_string());
            floor_distribution(group.len())
        })
    }

    fn note_degraded(track: &mut GenerationTrack, depth: usize, passage: Option<u32>, degraded: Vec<String>) {
        if !degraded.is_empty() {
            track.decide(
                "degraded_confidence",
                json!({ "depth": depth, "passage": passage, "groups": degraded }),
                json!("floor probability"),
            );
        }
    }

    fn score_grounded(&self, out: &GenerationOutput, track: &mut GenerationTrack, depth: usize, passage: u32) -> f64 {
        let v = self.vocab();
        let mut degraded = Vec::new();
        let rel = self.distribution(out, &[&v.relevant, &v.irrelevant], "relevance", &mut degraded);
        let sup = self.distribution(
            out,
            &[&v.fully_supported, &v.partially_supported, &v.no_support],
            "support",
            &mut degraded,
        );
        let utility_group: Vec<&str> = v.utility.iter().map(String::as_str).collect();
        let utility = self.distribution(out, &utility_group, "utility", &mut degraded);
        Self::note_degraded(track, depth, Some(passage), degraded);
        let score = critique_score(&self.config, rel[0], [sup[0], sup[1], sup[2]], &utility);
        track.decide(
            "candidate_score",
            json!({
                "depth": depth,
                "passage": passage,
                "p_rel": rel[0],
                "p_sup": sup[0] + 0.5 * sup[1],
                "p_use": expected_utility(&utility),
            }),
            json!(score),
        );
        score
    }

    fn score_ungrounded(&self, out: &GenerationOutput, track: &mut GenerationTrack, depth: usize) -> f64 {
        let utility_group: Vec<&str> = self.vocab().utility.iter().map(String::as_str).collect();
        let mut degraded = Vec::new();
        let utility = self.distribution(out, &utility_group, "utility", &mut degraded);
        Self::note_degraded(track, depth, None, degraded);
        let score = self.config.w_use * expected_utility(&utility);
        track.decide(
            "candidate_score",
            json!({ "depth": depth, "passage": null, "p_use": expected_utility(&utility) }),
            json!(score),
        );
        score
    }

    fn segment_of(&self, out: &GenerationOutput) -> (String, bool) {
        let ended = out.text.contains(&self.vocab().end);
        (self.vocab().strip(&out.text), ended)
    }

    fn grounded_prompt(&self, base: &str, passage: &Passage) -> String {
        let v = self.vocab();
        format!(
            "{base}{}{}{}\n{}{}",
            v.retrieval, v.paragraph_open, passage.title, passage.text, v.paragraph_close
        )
    }
}

impl Algorithm for SelfRag {
    fn kind(&self) -> AlgorithmKind {
        AlgorithmKind::SelfRag
    }

    fn stages(&self) -> &'static [&'static str] {
        &["self_rag"]
    }

    fn parameters(&self) -> serde_json::Value {
        json!(self.config)
    }

    fn infer(&self, ctx: &InferenceContext<'_>, query: &str, track: &mut GenerationTrack) -> Result<String, AlgoError> {
        let c = &self.config;
        if c.mode == SelfRagMode::No {
            let prompt = ctx.prompt("self_rag", &[("query", query), ("partial", "")])?;
            let out = ctx.generate(&prompt, track)?;
            return Ok(self.vocab().strip(&out.text).trim().to_string());
        }
        let mut beams = vec![Beam {
            text: String::new(),
            last_segment: String::new(),
            score: 0.0,
            path: Vec::new(),
            order: 0,
            done: false,
        }];
        let mut order = 0usize;
        for depth in 1..=c.max_depth {
            if beams.iter().all(|b| b.done) {
                break;
            }
            let mut candidates = Vec::new();
            for beam in &beams {
                if beam.done {
                    candidates.push(beam.clone());
                    continue;
                }
                let base = ctx.prompt("self_rag", &[("query", query), ("partial", &beam.text)])?;
                if c.mode == SelfRagMode::Adaptive {
                    let out = ctx.generate(&base, track)?;
                    let v = self.vocab();
                    let mut degraded = Vec::new();
                    let p = self.distribution(&out, &[&v.retrieval, &v.no_retrieval], "retrieval", &mut degraded);
                    Self::note_degraded(track, depth, None, degraded);
                    let retrieve = p[0] > c.threshold;
                    track.decide(
                        "retrieve",
                        json!({ "depth": depth, "p_retrieve": p[0], "threshold": c.threshold }),
                        json!(retrieve),
                    );
                    if !retrieve {
                        let score = self.score_ungrounded(&out, track, depth);
                        let (segment, ended) = self.segment_of(&out);
                        order += 1;
                        candidates.push(beam.extend(&segment, score, None, order, ended));
                        continue;
                    }
                }
                let search = if beam.last_segment.is_empty() {
                    query.to_string()
                } else {
                    format!("{query} {}", beam.last_segment)
                };
                let passages = ctx.retrieve(&search, track)?;
                if passages.is_empty() {
                    track.decide("empty_retrieval", json!({ "query": search }), json!(true));
                    let out = ctx.generate(&base, track)?;
                    let score = self.score_ungrounded(&out, track, depth);
                    let (segment, ended) = self.segment_of(&out);
                    order += 1;
                    candidates.push(beam.extend(&segment, score, None, order, ended));
                    continue;
                }
                for passage in &passages {
                    let out = ctx.generate(&self.grounded_prompt(&base, passage), track)?;
                    let score = self.score_grounded(&out, track, depth, passage.id);
                    let (segment, ended) = self.segment_of(&out);
                    order += 1;
                    candidates.push(beam.extend(&segment, score, Some(passage.id), order, ended));
                }
            }
            candidates.sort_by(beam_order);
            candidates.truncate(c.beam_width);
            track.decide(
                "beam",
                json!({ "depth": depth }),
                json!(candidates
                    .iter()
                    .map(|b| json!({ "path": b.path, "score": b.score, "done": b.done }))
                    .collect::<Vec<_>>()),
            );
            beams = candidates;
        }
        if beams.iter().any(|b| !b.done) {
            track.decide("depth_limit", json!({ "max_depth": c.max_depth }), json!(true));
        }
        beams.sort_by(beam_order);
        let best = &beams[0];
        track.decide("selected", json!({ "path": best.path }), json!(best.score));
        Ok(best.text.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::TokenLogprob;

    #[test]
    fn unit_probabilities_score_sum_of_weights() {
        let c = SelfRagConfig::default();
        let s = critique_score(&c, 1.0, [1.0, 0.0, 0.0], &[0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(s, 2.5);
        assert_eq!(
            critique_score(&c, 0.0, [0.0, 0.0, 1.0], &[1.0, 0.0, 0.0, 0.0, 0.0]),
            0.0
        );
        // partial support counts half; grade 3 of 5 is the midpoint
        assert_eq!(
            critique_score(&c, 0.0, [0.0, 1.0, 0.0], &[0.0, 0.0, 1.0, 0.0, 0.0]),
            0.5 + 0.25
        );
    }

    #[test]
    fn strip_removes_reflection_and_paragraphs() {
        let v = SelfRagVocabulary::default();
        assert_eq!(
            v.strip("[Retrieval]<paragraph>ctx</paragraph>[Relevant]Paris.[Fully supported][Utility:5]</s>"),
            "Paris."
        );
    }

    #[test]
    fn missing_group_is_uniform() {
        let out = GenerationOutput::from_tokens([("Paris", 0.9)]);
        assert!(group_distribution(&out, &["[Relevant]", "[Irrelevant]"]).is_none());
        assert_eq!(floor_distribution(2), vec![0.5, 0.5]);
        let out = GenerationOutput::from_logprobs(vec![
            TokenLogprob::new("x", 0.5),
            TokenLogprob::new("[Relevant]", 0.6).with_alternatives([("[Relevant]", 0.6), ("[Irrelevant]", 0.2)]),
        ]);
        let d = group_distribution(&out, &["[Relevant]", "[Irrelevant]"]).unwrap();
        assert!((d[0] - 0.75).abs() < 1e-12);
    }
}
