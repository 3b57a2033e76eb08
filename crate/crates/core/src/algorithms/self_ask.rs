//! Question decomposition through follow-up questions, each answered from
//! its own retrieval.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{check_at_least_one, AlgoError, Algorithm, AlgorithmKind, GenerationTrack, InferenceContext};
use crate::generator::GenParams;
use crate::instruction::format_passages;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfAskConfig {
    pub max_iteration: usize,
    pub follow_up_marker: String,
    pub intermediate_marker: String,
    pub final_marker: String,
}

impl Default for SelfAskConfig {
    fn default() -> Self {
        Self {
            max_iteration: 5,
            follow_up_marker: "Follow up:".into(),
            intermediate_marker: "Intermediate answer:".into(),
            final_marker: "So the final answer is:".into(),
        }
    }
}

impl SelfAskConfig {
    pub fn validate(&self) -> Result<(), AlgoError> {
        check_at_least_one("self_ask.max_iteration", self.max_iteration)?;
        for (name, m) in [
            ("follow_up_marker", &self.follow_up_marker),
            ("intermediate_marker", &self.intermediate_marker),
            ("final_marker", &self.final_marker),
        ] {
            if m.trim().is_empty() {
                return Err(AlgoError::Config(format!("self_ask.{name} must not be empty")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct SelfAsk {
    config: SelfAskConfig,
}

impl SelfAsk {
    pub fn new(config: SelfAskConfig) -> Self {
        Self { config }
    }

    fn with_stop(params: &GenParams, marker: &str) -> GenParams {
        let mut p = params.clone();
        if !p.stop.iter().any(|s| s == marker) {
            p.stop.push(marker.to_string());
        }
        p
    }
}

/// First non-empty line of `text`, trimmed.
fn first_line(text: &str) -> &str {
    text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("")
}

impl Algorithm for SelfAsk {
    fn kind(&self) -> AlgorithmKind {
        AlgorithmKind::SelfAsk
    }

    fn stages(&self) -> &'static [&'static str] {
        &["self_ask", "self_ask_intermediate"]
    }

    fn parameters(&self) -> serde_json::Value {
        json!(self.config)
    }

    fn infer(&self, ctx: &InferenceContext<'_>, query: &str, track: &mut GenerationTrack) -> Result<String, AlgoError> {
        let c = &self.config;
        let ask_params = Self::with_stop(ctx.params, &c.intermediate_marker);
        let answer_params = Self::with_stop(ctx.params, &c.follow_up_marker);
        let mut scratchpad = String::new();
        let mut last = String::new();
        for _ in 0..c.max_iteration {
            let prompt = ctx.prompt("self_ask", &[("query", query), ("scratchpad", &scratchpad)])?;
            let text = ctx.generate_with(&prompt, &ask_params, track)?.text;
            let final_at = text.find(&c.final_marker);
            let follow_at = text.find(&c.follow_up_marker);
            if let Some(at) = final_at {
                if follow_at.is_some() {
                    track.decide("both_markers", json!({ "text": text }), json!("final"));
                }
                return Ok(first_line(&text[at + c.final_marker.len()..]).to_string());
            }
            let follow = follow_at.map(|at| {
                let rest = &text[at + c.follow_up_marker.len()..];
                let line_end = at + c.follow_up_marker.len() + rest.find('\n').unwrap_or(rest.len());
                (first_line(rest).to_string(), line_end)
            });
            let Some((question, line_end)) = follow.filter(|(q, _)| !q.is_empty()) else {
                track.decide("no_marker", json!({ "text": text }), json!(true));
                return Ok(text.trim().to_string());
            };
            let passages = ctx.retrieve(&question, track)?;
            let block = format_passages(&passages);
            let prompt = ctx.prompt(
                "self_ask_intermediate",
                &[("passages", &block), ("follow_up", &question)],
            )?;
            let raw = ctx.generate_with(&prompt, &answer_params, track)?.text;
            let stripped = raw.trim_start();
            let intermediate = first_line(
                stripped
                    .strip_prefix(c.intermediate_marker.as_str())
                    .unwrap_or(stripped),
            );
            scratchpad.push_str(&text[..line_end]);
            scratchpad.push('\n');
            scratchpad.push_str(&c.intermediate_marker);
            scratchpad.push(' ');
            scratchpad.push_str(intermediate);
            scratchpad.push('\n');
            last = raw.trim().to_string();
        }
        track.decide(
            "budget_exhausted",
            json!({ "max_iteration": c.max_iteration }),
            json!(last),
        );
        Ok(last)
    }
}
