//! Corpus ingestion: raw documents in, fixed-size passages out.
//!
//! Two source layouts are accepted. `dpr-tsv` follows the DPR passage dump
//! convention (`id<TAB>text<TAB>title`, optional header row); `jsonl` carries
//! one `{"title": .., "text": ..}` object per line. Every document is cut into
//! consecutive windows of at most `chunk_words` whitespace tokens and each
//! window inherits the document title.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Default window size, matching the 100-word DPR passage convention.
pub const DEFAULT_CHUNK_WORDS: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("failed to read corpus {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed row at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("corpus is empty: no passages after chunking")]
    Empty,
    #[error("chunk_words must be positive")]
    ZeroChunk,
    #[error("unknown corpus format `{0}` (expected dpr-tsv or jsonl)")]
    UnknownFormat(String),
}

/// One retrievable chunk of text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub id: u32,
    pub title: String,
    pub text: String,
    /// Retrieval score; zero outside of search results.
    #[serde(default)]
    pub score: f64,
}

impl Passage {
    pub fn new(id: u32, title: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id,
            title: title.into(),
            text: text.into(),
            score: 0.0,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    DprTsv,
    Jsonl,
}

impl FromStr for CorpusFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dpr-tsv" | "tsv" => Ok(Self::DprTsv),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for CorpusFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DprTsv => f.write_str("dpr-tsv"),
            Self::Jsonl => f.write_str("jsonl"),
        }
    }
}

/// An ordered passage collection plus a digest of its content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    passages: Vec<Passage>,
    fingerprint: String,
}

impl Corpus {
    /// Builds a corpus from passages, renumbering ids densely from zero.
    pub fn from_passages(passages: Vec<Passage>) -> Result<Self, CorpusError> {
        if passages.is_empty() {
            return Err(CorpusError::Empty);
        }
        let passages: Vec<Passage> = passages
            .into_iter()
            .enumerate()
            .map(|(i, p)| Passage {
                id: i as u32,
                score: 0.0,
                ..p
            })
            .collect();
        let fingerprint = fingerprint_passages(&passages);
        Ok(Self { passages, fingerprint })
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn into_passages(self) -> Vec<Passage> {
        self.passages
    }
}

/// Stable digest over every passage id, title and text.
///
/// Fields are length-prefixed so that moving bytes between fields always
/// changes the digest.
pub fn fingerprint_passages(passages: &[Passage]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(b"ragbench-corpus-v1");
    for p in passages {
        hasher.update(p.id.to_le_bytes());
        for field in [p.title.as_bytes(), p.text.as_bytes()] {
            hasher.update((field.len() as u64).to_le_bytes());
            hasher.update(field);
        }
    }
    hex::encode(hasher.finalize())
}

/// Reads and chunks a corpus file.
pub fn ingest_corpus(path: impl AsRef<Path>, format: CorpusFormat, chunk_words: usize) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ingest_str(&raw, format, chunk_words)
}

/// Same as [`ingest_corpus`] over in-memory content.
pub fn ingest_str(raw: &str, format: CorpusFormat, chunk_words: usize) -> Result<Corpus, CorpusError> {
    if chunk_words == 0 {
        return Err(CorpusError::ZeroChunk);
    }
    let documents = match format {
        CorpusFormat::DprTsv => parse_tsv(raw)?,
        CorpusFormat::Jsonl => parse_jsonl(raw)?,
    };
    let mut passages = Vec::new();
    for (title, text) in documents {
        for window in chunk_words_of(&text, chunk_words) {
            passages.push(Passage::new(passages.len() as u32, title.clone(), window));
        }
    }
    Corpus::from_passages(passages)
}

/// Splits text into consecutive windows of at most `size` whitespace tokens.
pub fn chunk_words_of(text: &str, size: usize) -> Vec<String> {
    let words: Vec<&str> = text.split_whitespace().collect();
    words.chunks(size.max(1)).map(|w| w.join(" ")).collect()
}

fn parse_tsv(raw: &str) -> Result<Vec<(String, String)>, CorpusError> {
    let mut docs = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(CorpusError::Malformed {
                line: line_no,
                reason: format!(
                    "expected 3 tab-separated fields (id, text, title), found {}",
                    fields.len()
                ),
            });
        }
        if idx == 0 && fields[0].trim() == "id" && fields[1].trim() == "text" {
            continue;
        }
        if fields[0].trim().is_empty() {
            return Err(CorpusError::Malformed {
                line: line_no,
                reason: "empty id field".into(),
            });
        }
        docs.push((unquote(fields[2]), unquote(fields[1])));
    }
    Ok(docs)
}

/// DPR dumps wrap fields containing quotes in `"..."` with `""` escapes.
fn unquote(field: &str) -> String {
    let f = field.trim();
    if f.len() >= 2 && f.starts_with('"') && f.ends_with('"') {
        f[1..f.len() - 1].replace("\"\"", "\"")
    } else {
        f.to_string()
    }
}

#[derive(Deserialize)]
struct JsonDoc {
    #[serde(default)]
    title: String,
    text: String,
}

fn parse_jsonl(raw: &str) -> Result<Vec<(String, String)>, CorpusError> {
    let mut docs = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: JsonDoc = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        docs.push((doc.title, doc.text));
    }
    Ok(docs)
}

/// Lowercased tokens split on every non-alphanumeric boundary.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}
