//! HTTP client for a remote retrieval service.

use std::time::Duration;

use super::http::{Health, SearchRequest, SearchResponse};
use super::StatsSummary;
use crate::corpus::Passage;
use crate::http_util::{agent, parse_json, send_with_retry, RetryPolicy};
use crate::retriever::{RetrievalError, Retrieved, Retriever};

#[derive(Debug, Clone)]
pub struct RetrievalClient {
    endpoint: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
}

impl RetrievalClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            agent: agent(Duration::from_secs(30)),
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn call<T: serde::de::DeserializeOwned>(&self, path: &str, body: Option<String>) -> Result<T, RetrievalError> {
        let url = format!("{}{}", self.endpoint, path);
        let (status, text) = send_with_retry(&self.agent, &url, body.as_deref(), &[], self.retry).map_err(|f| {
            RetrievalError::Transport {
                attempts: f.attempts,
                message: f.message,
            }
        })?;
        if !(200..300).contains(&status) {
            return Err(RetrievalError::Protocol { status, body: text });
        }
        parse_json(&text).map_err(|(field, message)| RetrievalError::MalformedResponse { field, message })
    }

    /// Cached search on the server; returns the passages and whether they came from cache.
    pub fn search(&self, query: &str, k: usize) -> Result<SearchResponse, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        let body = serde_json::to_string(&SearchRequest {
            query: query.to_string(),
            k,
        })
        .expect("request serializes");
        self.call("/search", Some(body))
    }

    pub fn client_search(&self, query: &str, k: usize) -> Result<Vec<Passage>, RetrievalError> {
        self.search(query, k).map(|r| r.passages)
    }

    pub fn health(&self) -> Result<Health, RetrievalError> {
        self.call("/health", None)
    }

    pub fn stats(&self) -> Result<StatsSummary, RetrievalError> {
        self.call("/stats", None)
    }
}

impl Retriever for RetrievalClient {
    fn retrieve(&self, query: &str, k: usize) -> Result<Retrieved, RetrievalError> {
        let r = self.search(query, k)?;
        Ok(Retrieved {
            passages: r.passages,
            cache_hit: r.cache_hit,
        })
    }

    fn describe(&self) -> Result<String, RetrievalError> {
        let health = self.health()?;
        Ok(format!("remote-bm25|corpus={}", health.corpus_fingerprint))
    }
}
