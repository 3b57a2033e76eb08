//! The single query interface every algorithm retrieves through.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use crate::corpus::Passage;
use crate::index::InvertedIndex;

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    pub passages: Vec<Passage>,
    pub cache_hit: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("k must be at least 1")]
    InvalidK,
    #[error("retriever unreachable after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("retriever returned HTTP {status}: {body}")]
    Protocol { status: u16, body: String },
    #[error("malformed retriever response at `{field}`: {message}")]
    MalformedResponse { field: String, message: String },
    #[error("retrieval failed: {0}")]
    Backend(String),
}

pub trait Retriever: Send + Sync {
    fn retrieve(&self, query: &str, k: usize) -> Result<Retrieved, RetrievalError>;

    /// Stable description of the retriever configuration and corpus, folded
    /// into alignment fingerprints.
    fn describe(&self) -> Result<String, RetrievalError>;
}

impl<R: Retriever + ?Sized> Retriever for Arc<R> {
    fn retrieve(&self, query: &str, k: usize) -> Result<Retrieved, RetrievalError> {
        (**self).retrieve(query, k)
    }

    fn describe(&self) -> Result<String, RetrievalError> {
        (**self).describe()
    }
}

/// Direct index access without caching.
#[derive(Debug, Clone)]
pub struct LocalRetriever {
    index: Arc<InvertedIndex>,
}

impl LocalRetriever {
    pub fn new(index: Arc<InvertedIndex>) -> Self {
        Self { index }
    }
}

impl Retriever for LocalRetriever {
    fn retrieve(&self, query: &str, k: usize) -> Result<Retrieved, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        Ok(Retrieved {
            passages: self.index.search(query, k),
            cache_hit: false,
        })
    }

    fn describe(&self) -> Result<String, RetrievalError> {
        Ok(self.index.describe())
    }
}

/// Fixed query → passages table for tests and demos.
///
/// Unlisted queries get the default list; every call is logged.
#[derive(Debug, Default)]
pub struct ScriptedRetriever {
    table: BTreeMap<String, Vec<Passage>>,
    default: Vec<Passage>,
    calls: Mutex<Vec<(String, usize)>>,
}

impl ScriptedRetriever {
    pub fn new(default: Vec<Passage>) -> Self {
        Self {
            default,
            ..Self::default()
        }
    }

    pub fn with(mut self, query: impl Into<String>, passages: Vec<Passage>) -> Self {
        self.table.insert(query.into(), passages);
        self
    }

    pub fn calls(&self) -> Vec<(String, usize)> {
        self.calls.lock().unwrap().clone()
    }
}

impl Retriever for ScriptedRetriever {
    fn retrieve(&self, query: &str, k: usize) -> Result<Retrieved, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        self.calls.lock().unwrap().push((query.to_string(), k));
        let mut passages = self.table.get(query).unwrap_or(&self.default).clone();
        passages.truncate(k);
        Ok(Retrieved {
            passages,
            cache_hit: false,
        })
    }

    fn describe(&self) -> Result<String, RetrievalError> {
        Ok(format!(
            "scripted(entries={},default={})",
            self.table.len(),
            self.default.len()
        ))
    }
}
