//! Deterministic generator driven by a table of canned responses.
//!
//! Lookup order for a prompt: exact matcher, then the longest substring
//! matcher contained in the prompt, then the next unused ordinal response.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{
    apply_limits, sort_alternatives, Alternative, FinishReason, GenError, GenParams, GenerationOutput, Generator,
    TokenLogprob,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Matcher {
    Exact(String),
    Substring(String),
    /// Next response in registration order, consumed once.
    Ordinal,
}

#[derive(Default)]
struct ScriptTable {
    exact: BTreeMap<String, GenerationOutput>,
    substring: Vec<(String, GenerationOutput)>,
    ordinal: Vec<GenerationOutput>,
    cursor: usize,
    calls: Vec<String>,
}

pub struct ScriptedGenerator {
    name: String,
    table: Mutex<ScriptTable>,
}

impl std::fmt::Debug for ScriptedGenerator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedGenerator")
            .field("name", &self.name)
            .finish_non_exhaustive()
    }
}

impl ScriptedGenerator {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            table: Mutex::new(ScriptTable::default()),
        }
    }

    pub fn register_script(&self, matcher: Matcher, response: GenerationOutput) -> Result<(), GenError> {
        let response = if response.tokens.is_empty() && !response.text.is_empty() {
            GenerationOutput {
                finish_reason: response.finish_reason,
                ..GenerationOutput::from_text(response.text)
            }
        } else {
            response
        };
        if !response.is_detokenization_exact() {
            return Err(GenError::Registration(format!(
                "token texts do not concatenate to the response text {:?}",
                response.text
            )));
        }
        let mut table = self.table.lock().unwrap();
        match matcher {
            Matcher::Exact(p) => {
                if table.exact.contains_key(&p) {
                    return Err(GenError::Registration(format!("duplicate exact matcher {p:?}")));
                }
                table.exact.insert(p, response);
            }
            Matcher::Substring(p) => {
                if p.is_empty() {
                    return Err(GenError::Registration("empty substring matcher".into()));
                }
                if table.substring.iter().any(|(q, _)| *q == p) {
                    return Err(GenError::Registration(format!("duplicate substring matcher {p:?}")));
                }
                table.substring.push((p, response));
            }
            Matcher::Ordinal => table.ordinal.push(response),
        }
        Ok(())
    }

    /// Builder-style helpers; panic on a rejected registration.
    pub fn exact(self, prompt: impl Into<String>, response: GenerationOutput) -> Self {
        self.register_script(Matcher::Exact(prompt.into()), response)
            .expect("valid script");
        self
    }

    pub fn substring(self, pattern: impl Into<String>, response: GenerationOutput) -> Self {
        self.register_script(Matcher::Substring(pattern.into()), response)
            .expect("valid script");
        self
    }

    pub fn ordinal<I: IntoIterator<Item = GenerationOutput>>(self, responses: I) -> Self {
        for r in responses {
            self.register_script(Matcher::Ordinal, r).expect("valid script");
        }
        self
    }

    /// Every prompt received so far, in call order.
    pub fn calls(&self) -> Vec<String> {
        self.table.lock().unwrap().calls.clone()
    }

    pub fn call_count(&self) -> usize {
        self.table.lock().unwrap().calls.len()
    }

    pub fn from_script_file(name: impl Into<String>, path: impl AsRef<Path>) -> Result<Self, GenError> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path)
            .map_err(|e| GenError::Config(format!("cannot read script {}: {e}", path.display())))?;
        let file: ScriptFile = serde_yaml::from_str(&raw)
            .map_err(|e| GenError::Config(format!("invalid script {}: {e}", path.display())))?;
        let generator = Self::new(name);
        for entry in file.entries {
            let (matcher, output) = entry.into_parts()?;
            generator.register_script(matcher, output)?;
        }
        Ok(generator)
    }

    fn nearest(table: &ScriptTable, prompt: &str) -> Vec<String> {
        let mut scored: Vec<(usize, String)> = table
            .exact
            .keys()
            .map(|p| (strsim::levenshtein(prompt, p), format!("exact:{p:?}")))
            .chain(
                table
                    .substring
                    .iter()
                    .map(|(p, _)| (strsim::levenshtein(prompt, p), format!("substring:{p:?}"))),
            )
            .collect();
        scored.sort();
        let mut names: Vec<String> = scored.into_iter().take(3).map(|(_, n)| n).collect();
        if !table.ordinal.is_empty() && names.len() < 3 {
            names.push(format!("ordinal (exhausted after {})", table.ordinal.len()));
        }
        names
    }
}

impl Generator for ScriptedGenerator {
    fn complete(&self, prompt: &str, params: &GenParams) -> Result<GenerationOutput, GenError> {
        if prompt.trim().is_empty() {
            return Err(GenError::EmptyPrompt);
        }
        params.validate()?;
        let mut table = self.table.lock().unwrap();
        table.calls.push(prompt.to_string());
        let found = if let Some(r) = table.exact.get(prompt) {
            Some(r.clone())
        } else if let Some((_, r)) = table
            .substring
            .iter()
            .filter(|(p, _)| prompt.contains(p.as_str()))
            .fold(None::<&(String, GenerationOutput)>, |best, cur| match best {
                Some(b) if b.0.len() >= cur.0.len() => Some(b),
                _ => Some(cur),
            })
        {
            Some(r.clone())
        } else if table.cursor < table.ordinal.len() {
            table.cursor += 1;
            Some(table.ordinal[table.cursor - 1].clone())
        } else {
            None
        };
        match found {
            Some(out) => Ok(apply_limits(out, params)),
            None => Err(GenError::NoMatch {
                prompt: prompt.chars().take(120).collect(),
                nearest: Self::nearest(&table, prompt),
            }),
        }
    }

    fn describe(&self) -> String {
        format!("scripted:{}", self.name)
    }
}

/// On-disk script: a YAML list of matcher/response entries.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScriptFile {
    pub entries: Vec<ScriptEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    /// `exact`, `substring` or `ordinal`.
    #[serde(rename = "match")]
    pub matcher: String,
    #[serde(default)]
    pub pattern: Option<String>,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub tokens: Option<Vec<ScriptToken>>,
    #[serde(default)]
    pub finish_reason: Option<FinishReason>,
}

/// A token given by probability (`prob`) or log-probability (`logprob`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptToken {
    pub token: String,
    #[serde(default)]
    pub prob: Option<f64>,
    #[serde(default)]
    pub logprob: Option<f64>,
    #[serde(default)]
    pub top: Vec<ScriptToken>,
}

impl ScriptToken {
    fn logprob(&self) -> Result<f64, GenError> {
        match (self.prob, self.logprob) {
            (Some(p), None) if p > 0.0 && p <= 1.0 => Ok(p.ln()),
            (None, Some(lp)) if lp <= 0.0 => Ok(lp),
            (None, None) => Ok(0.0),
            _ => Err(GenError::Registration(format!(
                "token {:?} needs one of prob in (0,1] or logprob <= 0",
                self.token
            ))),
        }
    }

    fn to_logprob(&self) -> Result<TokenLogprob, GenError> {
        let mut top = self
            .top
            .iter()
            .map(|a| {
                Ok(Alternative {
                    token: a.token.clone(),
                    logprob: a.logprob()?,
                })
            })
            .collect::<Result<Vec<_>, GenError>>()?;
        sort_alternatives(&mut top);
        Ok(TokenLogprob {
            token: self.token.clone(),
            logprob: self.logprob()?,
            top,
        })
    }
}

impl ScriptEntry {
    pub fn into_parts(self) -> Result<(Matcher, GenerationOutput), GenError> {
        let matcher = match (self.matcher.as_str(), self.pattern) {
            ("exact", Some(p)) => Matcher::Exact(p),
            ("substring", Some(p)) => Matcher::Substring(p),
            ("ordinal", None) => Matcher::Ordinal,
            (m, _) => {
                return Err(GenError::Registration(format!(
                    "matcher `{m}` needs a pattern for exact/substring and none for ordinal"
                )))
            }
        };
        let mut output = match (self.text, self.tokens) {
            (_, Some(tokens)) => {
                GenerationOutput::from_logprobs(tokens.iter().map(ScriptToken::to_logprob).collect::<Result<_, _>>()?)
            }
            (Some(text), None) => GenerationOutput::from_text(text),
            (None, None) => return Err(GenError::Registration("script entry needs text or tokens".into())),
        };
        if let Some(reason) = self.finish_reason {
            output.finish_reason = reason;
        }
        Ok((matcher, output))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> GenParams {
        GenParams::default()
    }

    #[test]
    fn exact_echo() {
        let g = ScriptedGenerator::new("t").exact("P", GenerationOutput::from_text("Paris"));
        let out = g.complete("P", &params()).unwrap();
        assert_eq!(out.text, "Paris");
        assert_eq!(out.finish_reason, FinishReason::Stop);
    }

    #[test]
    fn ordinal_sequence() {
        let g =
            ScriptedGenerator::new("t").ordinal([GenerationOutput::from_text("R1"), GenerationOutput::from_text("R2")]);
        assert_eq!(g.complete("a", &params()).unwrap().text, "R1");
        assert_eq!(g.complete("a", &params()).unwrap().text, "R2");
        assert!(matches!(g.complete("a", &params()), Err(GenError::NoMatch { .. })));
    }

    #[test]
    fn longest_substring_wins() {
        let g = ScriptedGenerator::new("t")
            .substring("Question", GenerationOutput::from_text("generic"))
            .substring("Question: capital", GenerationOutput::from_text("specific"));
        assert_eq!(
            g.complete("Question: capital of France?", &params()).unwrap().text,
            "specific"
        );
        assert_eq!(g.complete("Question: other", &params()).unwrap().text, "generic");
    }

    #[test]
    fn duplicate_exact_rejected() {
        let g = ScriptedGenerator::new("t");
        g.register_script(Matcher::Exact("P".into()), GenerationOutput::from_text("a"))
            .unwrap();
        assert!(matches!(
            g.register_script(Matcher::Exact("P".into()), GenerationOutput::from_text("b")),
            Err(GenError::Registration(_))
        ));
    }

    #[test]
    fn unmatched_names_three_closest() {
        let g = ScriptedGenerator::new("t")
            .exact("alpha", GenerationOutput::from_text("1"))
            .exact("alphb", GenerationOutput::from_text("2"))
            .exact("zzzzzzzz", GenerationOutput::from_text("3"))
            .exact("alpha beta", GenerationOutput::from_text("4"));
        match g.complete("alphx", &params()) {
            Err(GenError::NoMatch { nearest, .. }) => {
                assert_eq!(
                    nearest,
                    vec!["exact:\"alpha\"", "exact:\"alphb\"", "exact:\"alpha beta\""]
                );
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn deterministic_including_logprobs() {
        let out =
            GenerationOutput::from_logprobs(vec![TokenLogprob::new("[Retrieval]", 0.6)
                .with_alternatives([("[Retrieval]", 0.6), ("[No Retrieval]", 0.4)])]);
        let g = ScriptedGenerator::new("t").exact("P", out);
        let a = g.complete("P", &params()).unwrap();
        let b = g.complete("P", &params()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.tokens[0].top.len(), 2);
        let zero = GenParams {
            logprobs_top_k: 0,
            ..params()
        };
        assert!(g.complete("P", &zero).unwrap().tokens[0].top.is_empty());
    }

    #[test]
    fn respects_max_tokens_and_stop() {
        let g = ScriptedGenerator::new("t").exact("P", GenerationOutput::from_text("a b c d"));
        let out = g
            .complete(
                "P",
                &GenParams {
                    max_new_tokens: 2,
                    ..params()
                },
            )
            .unwrap();
        assert_eq!(out.text, "a b");
        assert_eq!(out.finish_reason, FinishReason::Length);
    }

    #[test]
    fn empty_prompt_rejected() {
        let g = ScriptedGenerator::new("t");
        assert!(matches!(g.complete("  ", &params()), Err(GenError::EmptyPrompt)));
    }

    #[test]
    fn script_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.yaml");
        fs::write(
            &path,
            r#"
- match: exact
  pattern: "Q: hi"
  text: "hello"
- match: substring
  pattern: "sky"
  tokens:
    - {token: "blue", prob: 0.9, top: [{token: "blue", prob: 0.9}, {token: "grey", prob: 0.1}]}
- match: ordinal
  text: "first"
  finish_reason: length
"#,
        )
        .unwrap();
        let g = ScriptedGenerator::from_script_file("file", &path).unwrap();
        assert_eq!(g.complete("Q: hi", &params()).unwrap().text, "hello");
        let sky = g.complete("why is the sky", &params()).unwrap();
        assert_eq!(sky.tokens[0].top[1].token, "grey");
        let first = g.complete("anything", &params()).unwrap();
        assert_eq!(first.finish_reason, FinishReason::Length);
    }
}
