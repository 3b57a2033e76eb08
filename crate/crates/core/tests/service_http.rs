use std::sync::Arc;

use ragbench::corpus::{Corpus, Passage};
use ragbench::index::InvertedIndex;
use ragbench::retriever::{RetrievalError, Retriever};
use ragbench::service::client::RetrievalClient;
use ragbench::service::http::{serve, serve_service};
use ragbench::service::{RetrievalService, ServiceOptions};

fn index() -> InvertedIndex {
    let corpus = Corpus::from_passages(vec![
        Passage::new(0, "Paris", "Paris is the capital of France."),
        Passage::new(0, "Rome", "Rome is the capital of Italy."),
        Passage::new(0, "Thames", "The Thames flows through London."),
    ])
    .unwrap();
    InvertedIndex::build(&corpus)
}

#[test]
fn remote_results_match_local_search() {
    let index = Arc::new(index());
    let handle = serve_service(Arc::new(RetrievalService::in_memory(index.clone())), "127.0.0.1:0").unwrap();
    let client = RetrievalClient::new(handle.endpoint());
    let first = client.search("capital of France", 2).unwrap();
    assert!(!first.cache_hit);
    assert_eq!(first.passages, index.search("capital of France", 2));
    let again = client.search("  Capital   of FRANCE ", 2).unwrap();
    assert!(again.cache_hit);
    assert_eq!(again.passages, first.passages);
    assert!(!client.search("capital of France", 1).unwrap().cache_hit);

    let stats = client.stats().unwrap();
    assert_eq!((stats.total_queries, stats.cache_hits, stats.cache_misses), (3, 1, 2));
    assert_eq!(client.health().unwrap().corpus_fingerprint, index.corpus_fingerprint());
    assert!(client.describe().unwrap().contains(index.corpus_fingerprint()));
}

#[test]
fn bad_requests_are_protocol_errors() {
    let handle = serve(index(), "127.0.0.1:0", ServiceOptions::default()).unwrap();
    let client = RetrievalClient::new(handle.endpoint());
    assert!(matches!(client.search("x", 0), Err(RetrievalError::InvalidK)));
    let raw = raw_post(&format!("{}/search", handle.endpoint()), r#"{"query": 3}"#);
    assert_eq!(raw, 400);
    let raw = raw_post(&format!("{}/search", handle.endpoint()), r#"{"query": "x", "k": 0}"#);
    assert_eq!(raw, 400);
}

fn raw_post(url: &str, body: &str) -> u16 {
    use std::io::{Read, Write};
    let rest = url.trim_start_matches("http://");
    let (host, path) = rest.split_once('/').unwrap();
    let mut s = std::net::TcpStream::connect(host).unwrap();
    write!(
        s,
        "POST /{path} HTTP/1.1\r\nHost: {host}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut resp = String::new();
    s.read_to_string(&mut resp).unwrap();
    resp.split_whitespace().nth(1).unwrap().parse().unwrap()
}

#[test]
fn shutdown_persists_the_cache_for_the_next_server() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache.jsonl");
    let options = || ServiceOptions {
        cache_path: Some(cache.clone()),
        max_entries: None,
    };
    let handle = serve(index(), "127.0.0.1:0", options()).unwrap();
    let client = RetrievalClient::new(handle.endpoint());
    let cold = client.search("Thames London", 3).unwrap();
    assert!(!cold.cache_hit);
    handle.shutdown().unwrap();

    let handle = serve(index(), "127.0.0.1:0", options()).unwrap();
    let client = RetrievalClient::new(handle.endpoint());
    let warm = client.search("Thames London", 3).unwrap();
    assert!(warm.cache_hit);
    assert_eq!(warm.passages, cold.passages);
    assert_eq!(handle.service().search_invocations(), 0);
}

#[test]
fn unreachable_server_is_a_transport_error() {
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let client = RetrievalClient::new(format!("http://127.0.0.1:{port}")).with_retry(ragbench::RetryPolicy {
        attempts: 2,
        base_delay: std::time::Duration::from_millis(1),
    });
    assert!(matches!(
        client.search("x", 1),
        Err(RetrievalError::Transport { attempts: 2, .. })
    ));
}
