//! Ordered record of what one inference did.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::Passage;
use crate::generator::GenerationOutput;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Step {
    Retrieval {
        query: String,
        k: usize,
        passages: Vec<Passage>,
        cache_hit: bool,
    },
    Generation {
        prompt: String,
        output: GenerationOutput,
    },
    Decision {
        kind: String,
        inputs: Value,
        value: Value,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GenerationTrack {
    pub steps: Vec<Step>,
    #[serde(default)]
    pub answer: Option<String>,
}

/// Counts and retrieved ids, stable across runs regardless of cache state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackSummary {
    pub retrievals: usize,
    pub generations: usize,
    pub decisions: Vec<String>,
    pub retrieved_ids: Vec<u32>,
}

impl GenerationTrack {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, step: Step) {
        self.steps.push(step);
    }

    pub fn decide(&mut self, kind: &str, inputs: Value, value: Value) {
        self.steps.push(Step::Decision {
            kind: kind.to_string(),
            inputs,
            value,
        });
    }

    pub fn retrieval_count(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| matches!(s, Step::Retrieval { .. }))
            .count()
    }

    pub fn generation_count(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| matches!(s, Step::Generation { .. }))
            .count()
    }

    pub fn retrieval_queries(&self) -> Vec<&str> {
        self.steps
            .iter()
            .filter_map(|s| match s {
                Step::Retrieval { query, .. } => Some(query.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn decisions(&self, kind: &str) -> Vec<&Step> {
        self.steps
            .iter()
            .filter(|s| matches!(s, Step::Decision { kind: k, .. } if k == kind))
            .collect()
    }

    pub fn has_decision(&self, kind: &str) -> bool {
        !self.decisions(kind).is_empty()
    }

    /// Step-type letters, e.g. `"RG"` for one retrieval then one generation.
    pub fn shape(&self) -> String {
        self.steps
            .iter()
            .map(|s| match s {
                Step::Retrieval { .. } => 'R',
                Step::Generation { .. } => 'G',
                Step::Decision { .. } => 'D',
            })
            .collect()
    }

    pub fn summary(&self) -> TrackSummary {
        let mut retrieved_ids = Vec::new();
        let mut decisions = Vec::new();
        for s in &self.steps {
            match s {
                Step::Retrieval { passages, .. } => retrieved_ids.extend(passages.iter().map(|p| p.id)),
                Step::Decision { kind, .. } => decisions.push(kind.clone()),
                Step::Generation { .. } => {}
            }
        }
        TrackSummary {
            retrievals: self.retrieval_count(),
            generations: self.generation_count(),
            decisions,
            retrieved_ids,
        }
    }

    /// Human-readable rendering for the interactive shell.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.steps.iter().enumerate() {
            match s {
                Step::Retrieval {
                    query,
                    k,
                    passages,
                    cache_hit,
                } => {
                    out.push_str(&format!(
                        "{:>3}. retrieve k={k}{} {query:?}\n",
                        i + 1,
                        if *cache_hit { " (cached)" } else { "" }
                    ));
                    for p in passages {
                        out.push_str(&format!("       #{} {:.4}  {}\n", p.id, p.score, p.title));
                    }
                }
                Step::Generation { output, .. } => {
                    out.push_str(&format!("{:>3}. generate -> {:?}\n", i + 1, output.text));
                }
                Step::Decision { kind, value, .. } => {
                    out.push_str(&format!("{:>3}. decide {kind} = {value}\n", i + 1));
                }
            }
        }
        if let Some(a) = &self.answer {
            out.push_str(&format!("answer: {a}\n"));
        }
        out
    }
}
