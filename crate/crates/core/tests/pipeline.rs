mod common;

use std::fs;
use std::path::Path;

use serde_json::json;

use common::write_toy_index;
use ragbench::config::RunConfig;
use ragbench::eval::{EvalReport, Metric};
use ragbench::pipeline::{config_from_report, Outcome, Rag};
use ragbench::Error;

const SCRIPT: &str = r#"
- match: substring
  pattern: "Henry Feilden's occupation"
  text: "He was a politician."
- match: substring
  pattern: "the capital of France"
  text: "Paris."
- match: substring
  pattern: "helpful assistant"
  text: "I do not know."
"#;

fn fixture(dir: &Path) -> RunConfig {
    write_toy_index(dir);
    fs::write(dir.join("script.yaml"), SCRIPT).unwrap();
    let items = [
        ("a", "What is Henry Feilden's occupation?", "politician"),
        ("b", "What is the capital of France?", "Paris"),
        ("c", "Which river flows through London?", "Thames"),
    ];
    let lines: String = items
        .iter()
        .map(|(id, q, a)| format!("{}\n", json!({ "id": id, "question": q, "golden_answers": [a] })))
        .collect();
    fs::write(dir.join("items.jsonl"), lines).unwrap();
    fs::write(
        dir.join("run.yaml"),
        "algorithm: naive_rag\n\
         n_docs: 2\n\
         generator:\n  endpoints:\n    main: {kind: scripted, script: script.yaml}\n\
         retriever: {index: wiki.bm25}\n\
         benchmark: {preset: popqa, dataset: items.jsonl}\n\
         output_dir: runs\n",
    )
    .unwrap();
    RunConfig::load(dir.join("run.yaml"), &[]).unwrap()
}

#[test]
fn echoed_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let report = Rag::from_config(&cfg).unwrap().evaluate().unwrap();
    assert_eq!(report.counts.items, 3);

    let echoed = config_from_report(&report.config).unwrap();
    assert_eq!(echoed, cfg);
    let mut elsewhere = echoed.clone();
    elsewhere.output_dir = dir.path().join("again");
    let again = Rag::from_config(&elsewhere).unwrap().evaluate().unwrap();
    assert_eq!(again.records, report.records);
    assert_eq!(again.aggregates, report.aggregates);
    assert_eq!(again.fingerprint, report.fingerprint);
    let records = |d: &Path| fs::read(d.join("popqa-naive_rag").join("records.jsonl")).unwrap();
    assert_eq!(records(&cfg.output_dir), records(&elsewhere.output_dir));
}

#[test]
fn aggregates_are_recomputable_from_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let rag = Rag::from_config(&cfg).unwrap();
    let report = rag.evaluate().unwrap();
    let metrics = &rag.prepared().benchmark.as_ref().unwrap().1.metrics;
    assert!(metrics.contains(&Metric::Acc));
    let recomputed = EvalReport::recompute_aggregates(&report.records, metrics);
    assert_eq!(recomputed.len(), report.aggregates.len());
    for (name, mean) in &recomputed {
        assert!((report.aggregates[name] - mean).abs() < 1e-9, "{name}");
    }
    assert!((report.aggregates["acc"] - 2.0 / 3.0).abs() < 1e-9);
}

#[test]
fn inference_dispatches_on_mode() {
    let dir = tempfile::tempdir().unwrap();
    let rag = Rag::from_config(&fixture(dir.path())).unwrap();
    match rag
        .inference(Some("What is the capital of France?"), "interact")
        .unwrap()
    {
        Outcome::Answer(inf) => {
            assert_eq!(inf.answer, "Paris.");
            assert_eq!(inf.track.retrieval_count(), 1);
        }
        Outcome::Report(_) => panic!("interact returned a report"),
    }
    assert!(matches!(rag.inference(None, "evaluation").unwrap(), Outcome::Report(r) if r.counts.items == 3));

    let missing = rag.inference(None, "interact").unwrap_err();
    assert!(matches!(missing, Error::Usage(_)));
    assert_eq!(missing.exit_code(), 2);
    let unknown = rag.inference(Some("q"), "batch").unwrap_err();
    assert!(matches!(unknown, Error::Usage(_)));
}

#[test]
fn evaluation_without_benchmark_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = fixture(dir.path());
    cfg.benchmark = None;
    let rag = Rag::from_config(&cfg).unwrap();
    assert!(matches!(rag.evaluate(), Err(Error::Usage(_))));
    assert!(rag.interact("What is the capital of France?").is_ok());
}

#[test]
fn local_cache_persists_between_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache.jsonl");
    let cfg = fixture(dir.path())
        .with_overrides(&[ragbench::config::parse_override(&format!("retriever.cache={}", cache.display())).unwrap()])
        .unwrap();
    let rag = Rag::from_config(&cfg).unwrap();
    rag.interact("What is the capital of France?").unwrap();
    rag.persist_cache().unwrap();
    assert!(fs::read_to_string(&cache).unwrap().lines().count() >= 1);
    let rag = Rag::from_config(&cfg).unwrap();
    let inf = rag.interact("What is the capital of France?").unwrap();
    let hit = inf
        .track
        .steps
        .iter()
        .any(|s| matches!(s, ragbench::algorithms::Step::Retrieval { cache_hit: true, .. }));
    assert!(hit, "second process should hit the persisted cache");
}
