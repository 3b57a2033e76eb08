//! Client for the OpenAI-compatible `/completions` endpoint.
//!
//! Only the fields the engine needs are used: `prompt`, `max_tokens`,
//! `temperature`, `seed`, `logprobs` and `stop`.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{
    sort_alternatives, Alternative, FinishReason, GenError, GenParams, GenerationOutput, Generator, TokenLogprob,
};
use crate::http_util::{agent, parse_json, send_with_retry, RetryPolicy};

#[derive(Debug, Clone)]
pub struct OpenAiCompletionClient {
    base_url: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    retry: RetryPolicy,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Deserialize)]
struct Logprobs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    top_logprobs: Option<Vec<Option<BTreeMap<String, f64>>>>,
}

#[derive(Deserialize)]
struct ErrorEnvelope {
    error: ErrorBody,
}

#[derive(Deserialize)]
struct ErrorBody {
    message: String,
}

impl OpenAiCompletionClient {
    /// `base_url` includes the API prefix, e.g. `http://localhost:8000/v1`.
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key,
            agent: agent(Duration::from_secs(300)),
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn request_body(&self, prompt: &str, params: &GenParams) -> serde_json::Value {
        let mut body = json!({
            "model": self.model,
            "prompt": prompt,
            "max_tokens": params.max_new_tokens,
            "temperature": params.temperature,
            "seed": params.seed,
        });
        if params.logprobs_top_k > 0 {
            body["logprobs"] = json!(params.logprobs_top_k);
        }
        if !params.stop.is_empty() {
            body["stop"] = json!(params.stop);
        }
        body
    }
}

impl Generator for OpenAiCompletionClient {
    fn complete(&self, prompt: &str, params: &GenParams) -> Result<GenerationOutput, GenError> {
        if prompt.trim().is_empty() {
            return Err(GenError::EmptyPrompt);
        }
        params.validate()?;
        let url = format!("{}/completions", self.base_url);
        let headers: Vec<(String, String)> = self
            .api_key
            .iter()
            .map(|k| ("authorization".to_string(), format!("Bearer {k}")))
            .collect();
        let body = self.request_body(prompt, params).to_string();
        let (status, text) =
            send_with_retry(&self.agent, &url, Some(&body), &headers, self.retry).map_err(|f| GenError::Transport {
                attempts: f.attempts,
                message: f.message,
            })?;
        if let Ok(env) = serde_json::from_str::<ErrorEnvelope>(&text) {
            return Err(GenError::Backend(env.error.message));
        }
        if !(200..300).contains(&status) {
            return Err(GenError::Backend(format!("HTTP {status}: {text}")));
        }
        let resp: CompletionResponse =
            parse_json(&text).map_err(|(field, message)| GenError::Malformed { field, message })?;
        let choice = resp.choices.into_iter().next().ok_or_else(|| GenError::Malformed {
            field: "choices".into(),
            message: "no choices returned".into(),
        })?;
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            _ => FinishReason::Stop,
        };
        let k = params.logprobs_top_k as usize;
        let tokens = match choice.logprobs {
            Some(lp) => convert_logprobs(lp, k)?,
            None if k > 0 => {
                return Err(GenError::Capability(format!(
                    "endpoint {} returned no logprobs although {k} were requested",
                    self.base_url
                )))
            }
            None => Vec::new(),
        };
        Ok(GenerationOutput {
            text: choice.text,
            tokens,
            finish_reason,
        })
    }

    fn describe(&self) -> String {
        format!("openai-completions:{}#{}", self.base_url, self.model)
    }
}

fn convert_logprobs(lp: Logprobs, k: usize) -> Result<Vec<TokenLogprob>, GenError> {
    if lp.tokens.len() != lp.token_logprobs.len() {
        return Err(GenError::Malformed {
            field: "choices[0].logprobs.token_logprobs".into(),
            message: "length differs from tokens".into(),
        });
    }
    let tops = lp.top_logprobs.unwrap_or_default();
    Ok(lp
        .tokens
        .into_iter()
        .zip(lp.token_logprobs)
        .enumerate()
        .map(|(i, (token, logprob))| {
            let mut top: Vec<Alternative> = tops
                .get(i)
                .cloned()
                .flatten()
                .unwrap_or_default()
                .into_iter()
                .map(|(token, logprob)| Alternative { token, logprob })
                .collect();
            sort_alternatives(&mut top);
            top.truncate(k);
            TokenLogprob {
                token,
                logprob: logprob.unwrap_or(0.0).min(0.0),
                top,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_includes_only_used_fields() {
        let c = OpenAiCompletionClient::new("http://x/v1/", "m", None);
        let body = c.request_body(
            "hi",
            &GenParams {
                logprobs_top_k: 0,
                ..GenParams::default()
            },
        );
        assert_eq!(body["model"], "m");
        assert_eq!(body["max_tokens"], 300);
        assert!(body.get("logprobs").is_none());
        assert!(body.get("stop").is_none());
        let body = c.request_body(
            "hi",
            &GenParams {
                stop: vec!["\n".into()],
                ..GenParams::default()
            },
        );
        assert_eq!(body["logprobs"], 5);
        assert_eq!(body["stop"][0], "\n");
        assert_eq!(c.describe(), "openai-completions:http://x/v1#m");
    }

    #[test]
    fn logprob_conversion_sorts_and_truncates() {
        let lp: Logprobs = serde_json::from_value(json!({
            "tokens": ["a", " b"],
            "token_logprobs": [-0.1, null],
            "top_logprobs": [{"x": -3.0, "a": -0.1, "y": -2.0}, null]
        }))
        .unwrap();
        let t = convert_logprobs(lp, 2).unwrap();
        assert_eq!(
            t[0].top.iter().map(|a| a.token.as_str()).collect::<Vec<_>>(),
            vec!["a", "y"]
        );
        assert_eq!(t[1].logprob, 0.0);
        assert!(t[1].top.is_empty());
    }
}
