#![allow(dead_code)]

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ragbench::corpus::{Corpus, Passage};
use ragbench::generator::{apply_limits, GenError, GenParams, GenerationOutput, Generator};
use ragbench::index::InvertedIndex;

/// Generator backed by a closure over the prompt; counts and logs calls.
pub struct FnGen<F> {
    f: F,
    calls: AtomicUsize,
    prompts: Mutex<Vec<String>>,
    logprobs: bool,
}

impl<F: Fn(&str) -> GenerationOutput + Send + Sync> FnGen<F> {
    pub fn new(f: F) -> Self {
        Self {
            f,
            calls: AtomicUsize::new(0),
            prompts: Mutex::new(Vec::new()),
            logprobs: true,
        }
    }

    pub fn without_logprobs(mut self) -> Self {
        self.logprobs = false;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().unwrap().clone()
    }
}

impl<F: Fn(&str) -> GenerationOutput + Send + Sync> Generator for FnGen<F> {
    fn complete(&self, prompt: &str, params: &GenParams) -> Result<GenerationOutput, GenError> {
        params.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.prompts.lock().unwrap().push(prompt.to_string());
        Ok(apply_limits((self.f)(prompt), params))
    }

    fn describe(&self) -> String {
        "fn-generator".into()
    }

    fn supports_logprobs(&self) -> bool {
        self.logprobs
    }
}

pub fn passages(n: u32) -> Vec<Passage> {
    (0..n)
        .map(|i| Passage::new(i, format!("P{i}"), format!("passage number {i}")).with_score(1.0 - f64::from(i) * 0.1))
        .collect()
}

/// Small index over a handful of facts, written to `dir/wiki.bm25`.
pub fn write_toy_index(dir: &Path) -> std::path::PathBuf {
    let texts = [
        (
            "Henry Feilden",
            "Henry Feilden was a British Army officer and Conservative politician.",
        ),
        ("Paris", "Paris is the capital and most populous city of France."),
        (
            "Thames",
            "The Thames is a river that flows through southern England and London.",
        ),
        ("Everest", "Mount Everest is the highest mountain above sea level."),
        (
            "Python",
            "Python is a programming language created by Guido van Rossum.",
        ),
    ];
    let corpus =
        Corpus::from_passages(texts.iter().map(|(t, x)| Passage::new(0, *t, *x)).collect()).expect("non-empty corpus");
    let path = dir.join("wiki.bm25");
    InvertedIndex::build(&corpus).save(&path).expect("index saves");
    path
}
