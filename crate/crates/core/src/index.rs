//! BM25 inverted index over a [`Corpus`].
//!
//! The index owns its passages so a serialized index file is enough to run a
//! retriever. Files carry a one-line JSON header (format, version, tokenizer
//! id, BM25 parameters, corpus fingerprint) followed by a one-line JSON body.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{fingerprint_passages, tokenize, Corpus, Passage};

pub const INDEX_FORMAT: &str = "ragbench-bm25-index";
pub const INDEX_VERSION: u32 = 1;
pub const TOKENIZER_ID: &str = "unicode-alnum-lower-v1";

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("index io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid index file: {0}")]
    Format(String),
    #[error("index file corpus fingerprint mismatch: header {header}, content {actual}")]
    FingerprintMismatch { header: String, actual: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

impl Bm25Params {
    pub fn describe(&self) -> String {
        format!("bm25(k1={},b={})", self.k1, self.b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

/// Inverse document frequency, non-negative variant.
pub fn bm25_idf(doc_count: usize, doc_freq: usize) -> f64 {
    let n = doc_count as f64;
    let df = doc_freq as f64;
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

/// Contribution of one query term to one document's score.
pub fn bm25_term_score(tf: u32, doc_len: u32, avgdl: f64, idf: f64, params: Bm25Params) -> f64 {
    let tf = tf as f64;
    let norm = params.k1 * (1.0 - params.b + params.b * doc_len as f64 / avgdl);
    idf * tf * (params.k1 + 1.0) / (tf + norm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    params: Bm25Params,
    corpus_fingerprint: String,
    passages: Vec<Passage>,
    postings: BTreeMap<String, Vec<Posting>>,
    doc_lens: Vec<u32>,
    avgdl: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    tokenizer: String,
    k1: f64,
    b: f64,
    corpus_fingerprint: String,
    passages: usize,
    terms: usize,
}

#[derive(Serialize, Deserialize)]
struct Body {
    passages: Vec<Passage>,
    doc_lens: Vec<u32>,
    postings: BTreeMap<String, Vec<Posting>>,
}

impl InvertedIndex {
    pub fn build(corpus: &Corpus) -> Self {
        Self::build_with(corpus, Bm25Params::default())
    }

    pub fn build_with(corpus: &Corpus, params: Bm25Params) -> Self {
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lens = Vec::with_capacity(corpus.len());
        for passage in corpus.passages() {
            let tokens = tokenize(&passage.text);
            doc_lens.push(tokens.len() as u32);
            let mut counts: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *counts.entry(t).or_default() += 1;
            }
            // Passages are visited in ascending id order, so pushes keep lists sorted.
            for (term, tf) in counts {
                postings.entry(term).or_default().push(Posting { doc: passage.id, tf });
            }
        }
        let avgdl = average(&doc_lens);
        Self {
            params,
            corpus_fingerprint: corpus.fingerprint().to_string(),
            passages: corpus.passages().to_vec(),
            postings,
            doc_lens,
            avgdl,
        }
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn corpus_fingerprint(&self) -> &str {
        &self.corpus_fingerprint
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn doc_count(&self) -> usize {
        self.doc_lens.len()
    }

    pub fn term_count(&self) -> usize {
        self.postings.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn doc_len(&self, doc: u32) -> Option<u32> {
        self.doc_lens.get(doc as usize).copied()
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn terms(&self) -> impl Iterator<Item = (&str, &[Posting])> {
        self.postings.iter().map(|(t, p)| (t.as_str(), p.as_slice()))
    }

    /// Identifies tokenizer, scoring parameters and corpus for cache keys and fingerprints.
    pub fn describe(&self) -> String {
        format!(
            "{}|{}|corpus={}",
            TOKENIZER_ID,
            self.params.describe(),
            self.corpus_fingerprint
        )
    }

    /// Top-`k` passages by BM25, ties broken by ascending passage id.
    pub fn search(&self, query: &str, k: usize) -> Vec<Passage> {
        let mut ranked = self.rank(query);
        ranked.truncate(k);
        ranked
            .into_iter()
            .map(|(doc, score)| self.passages[doc as usize].clone().with_score(score))
            .collect()
    }

    /// Every passage sharing at least one term with the query, fully ordered.
    pub fn rank(&self, query: &str) -> Vec<(u32, f64)> {
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        let n = self.doc_count();
        let mut scores: BTreeMap<u32, f64> = BTreeMap::new();
        for term in &terms {
            let list = self.postings(term);
            if list.is_empty() {
                continue;
            }
            let idf = bm25_idf(n, list.len());
            for p in list {
                let s = bm25_term_score(p.tf, self.doc_lens[p.doc as usize], self.avgdl, idf, self.params);
                *scores.entry(p.doc).or_insert(0.0) += s;
            }
        }
        let mut ranked: Vec<(u32, f64)> = scores.into_iter().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format: INDEX_FORMAT.into(),
            version: INDEX_VERSION,
            tokenizer: TOKENIZER_ID.into(),
            k1: self.params.k1,
            b: self.params.b,
            corpus_fingerprint: self.corpus_fingerprint.clone(),
            passages: self.passages.len(),
            terms: self.postings.len(),
        };
        let body = Body {
            passages: self.passages.clone(),
            doc_lens: self.doc_lens.clone(),
            postings: self.postings.clone(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        serde_json::to_writer(&mut out, &body).expect("body serializes");
        out.push(b'\n');
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        let mut reader = BufReader::new(bytes);
        let mut line = String::new();
        reader
            .read_line(&mut line)
            .map_err(|e| IndexError::Format(e.to_string()))?;
        let header: Header = serde_json::from_str(&line).map_err(|e| IndexError::Format(format!("header: {e}")))?;
        if header.format != INDEX_FORMAT {
            return Err(IndexError::Format(format!("unexpected format `{}`", header.format)));
        }
        if header.version != INDEX_VERSION {
            return Err(IndexError::Format(format!("unsupported version {}", header.version)));
        }
        if header.tokenizer != TOKENIZER_ID {
            return Err(IndexError::Format(format!(
                "unsupported tokenizer `{}`",
                header.tokenizer
            )));
        }
        line.clear();
        reader
            .read_line(&mut line)
            .map_err(|e| IndexError::Format(e.to_string()))?;
        let body: Body = serde_json::from_str(&line).map_err(|e| IndexError::Format(format!("body: {e}")))?;
        if body.passages.len() != body.doc_lens.len() || body.passages.len() != header.passages {
            return Err(IndexError::Format("passage count mismatch".into()));
        }
        let actual = fingerprint_passages(&body.passages);
        if actual != header.corpus_fingerprint {
            return Err(IndexError::FingerprintMismatch {
                header: header.corpus_fingerprint,
                actual,
            });
        }
        let avgdl = average(&body.doc_lens);
        Ok(Self {
            params: Bm25Params {
                k1: header.k1,
                b: header.b,
            },
            corpus_fingerprint: header.corpus_fingerprint,
            passages: body.passages,
            postings: body.postings,
            doc_lens: body.doc_lens,
            avgdl,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        let path = path.as_ref();
        let io = |source| IndexError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| IndexError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn average(lens: &[u32]) -> f64 {
    if lens.is_empty() {
        return 0.0;
    }
    lens.iter().map(|&l| l as u64).sum::<u64>() as f64 / lens.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ingest_str, CorpusFormat};
    use proptest::prelude::*;

    fn corpus(texts: &[&str]) -> Corpus {
        Corpus::from_passages(texts.iter().map(|t| Passage::new(0, "t", *t)).collect()).unwrap()
    }

    #[test]
    fn single_passage_counts() {
        let idx = InvertedIndex::build(&corpus(&["a a b"]));
        assert_eq!(idx.postings("a"), &[Posting { doc: 0, tf: 2 }]);
        assert_eq!(idx.postings("b"), &[Posting { doc: 0, tf: 1 }]);
        assert_eq!(idx.avgdl(), 3.0);
    }

    #[test]
    fn toy_postings_match_recount() {
        let texts = ["the cat sat", "The dog, the cat!", "birds sing"];
        let idx = InvertedIndex::build(&corpus(&texts));
        // independent recount: scan every passage for every vocabulary term
        let mut vocab = BTreeSet::new();
        for t in texts {
            for w in t.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
                vocab.insert(w.to_lowercase());
            }
        }
        assert_eq!(idx.term_count(), vocab.len());
        for term in &vocab {
            let mut expected = Vec::new();
            for (doc, t) in texts.iter().enumerate() {
                let tf = t
                    .split(|c: char| !c.is_alphanumeric())
                    .filter(|w| w.to_lowercase() == *term)
                    .count() as u32;
                if tf > 0 {
                    expected.push(Posting { doc: doc as u32, tf });
                }
            }
            assert_eq!(idx.postings(term), expected.as_slice(), "term {term}");
        }
        assert_eq!(
            idx.postings("the"),
            &[Posting { doc: 0, tf: 1 }, Posting { doc: 1, tf: 2 }]
        );
    }

    #[test]
    fn build_is_byte_deterministic_and_round_trips() {
        let c = ingest_str(
            "1\tParis is the capital of France\tParis\n2\tBerlin is in Germany\tBerlin\n",
            CorpusFormat::DprTsv,
            4,
        )
        .unwrap();
        let a = InvertedIndex::build(&c).to_bytes();
        let b = InvertedIndex::build(&c).to_bytes();
        assert_eq!(a, b);
        let loaded = InvertedIndex::from_bytes(&a).unwrap();
        assert_eq!(loaded, InvertedIndex::build(&c));
        assert_eq!(loaded.to_bytes(), a);
    }

    #[test]
    fn header_is_self_describing() {
        let idx = InvertedIndex::build(&corpus(&["x y"]));
        let bytes = idx.to_bytes();
        let first = bytes.split(|&b| b == b'\n').next().unwrap();
        let v: serde_json::Value = serde_json::from_slice(first).unwrap();
        assert_eq!(v["format"], INDEX_FORMAT);
        assert_eq!(v["version"], INDEX_VERSION);
        assert_eq!(v["tokenizer"], TOKENIZER_ID);
        assert_eq!(v["k1"], 0.9);
        assert_eq!(v["b"], 0.4);
        assert_eq!(v["corpus_fingerprint"], idx.corpus_fingerprint());
    }

    #[test]
    fn tampered_body_detected() {
        let idx = InvertedIndex::build(&corpus(&["alpha beta"]));
        let text = String::from_utf8(idx.to_bytes())
            .unwrap()
            .replace("alpha beta", "alpha gamma");
        assert!(matches!(
            InvertedIndex::from_bytes(text.as_bytes()),
            Err(IndexError::FingerprintMismatch { .. })
        ));
        assert!(InvertedIndex::from_bytes(b"{}\n").is_err());
    }

    #[test]
    fn no_overlap_is_empty() {
        let idx = InvertedIndex::build(&corpus(&["a b", "c d"]));
        assert!(idx.search("zzz", 10).is_empty());
        assert!(idx.search("", 10).is_empty());
    }

    #[test]
    fn ties_break_by_id() {
        let idx = InvertedIndex::build(&corpus(&["x q", "x q", "x q"]));
        let ids: Vec<u32> = idx.search("x", 10).iter().map(|p| p.id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    proptest! {
        #[test]
        fn results_are_prefix_of_full_ranking(
            docs in proptest::collection::vec(proptest::collection::vec(0u8..8, 1..12), 1..40),
            query in proptest::collection::vec(0u8..10, 0..5),
            k in 1usize..50,
        ) {
            let texts: Vec<String> = docs.iter().map(|d| d.iter().map(|w| format!("w{w}")).collect::<Vec<_>>().join(" ")).collect();
            let c = Corpus::from_passages(texts.iter().map(|t| Passage::new(0, "", t.clone())).collect()).unwrap();
            let idx = InvertedIndex::build(&c);
            let q = query.iter().map(|w| format!("w{w}")).collect::<Vec<_>>().join(" ");
            let full = idx.search(&q, usize::MAX);
            let top = idx.search(&q, k);
            prop_assert_eq!(&full[..top.len()], top.as_slice());
            prop_assert!(top.len() <= k);
            prop_assert!(top.iter().all(|p| p.score > 0.0));
            prop_assert!(top.windows(2).all(|w| w[0].score >= w[1].score));
            prop_assert_eq!(idx.search(&q, k), top);
            for p in idx.passages() {
                let sum: u32 = idx.terms().flat_map(|(_, l)| l.iter()).filter(|x| x.doc == p.id).map(|x| x.tf).sum();
                prop_assert_eq!(sum, idx.doc_len(p.id).unwrap());
            }
        }
    }
}
