//! HTTP front end for [`RetrievalService`].
//!
//! `POST /search` `{"query": str, "k": int}` answers
//! `{"passages": [...], "cache_hit": bool}`; `GET /health` and `GET /stats`
//! report liveness and cache counters.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use super::{RetrievalService, ServiceOptions, StatsSummary};
use crate::corpus::Passage;
use crate::index::InvertedIndex;
use crate::retriever::RetrievalError;

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("server runtime failed: {0}")]
    Runtime(#[from] std::io::Error),
    #[error("server thread panicked")]
    Panicked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRequest {
    pub query: String,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub passages: Vec<Passage>,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub corpus_fingerprint: String,
}

/// A running server. Dropping it shuts the server down and persists the cache.
pub struct ServiceHandle {
    addr: SocketAddr,
    service: Arc<RetrievalService>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl std::fmt::Debug for ServiceHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServiceHandle")
            .field("addr", &self.addr)
            .finish_non_exhaustive()
    }
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn service(&self) -> &Arc<RetrievalService> {
        &self.service
    }

    /// Stops accepting requests, drains in-flight ones, compacts the cache.
    pub fn shutdown(mut self) -> Result<(), ServeError> {
        self.stop()
    }

    fn stop(&mut self) -> Result<(), ServeError> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(thread) = self.thread.take() {
            thread.join().map_err(|_| ServeError::Panicked)??;
            self.service.persist()?;
        }
        Ok(())
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        if let Err(e) = self.stop() {
            log::warn!("retrieval server shutdown: {e}");
        }
    }
}

/// Loads the cache, binds `addr` and serves on a background runtime.
pub fn serve(index: InvertedIndex, addr: &str, options: ServiceOptions) -> Result<ServiceHandle, ServeError> {
    let service = Arc::new(RetrievalService::open(Arc::new(index), options));
    serve_service(service, addr)
}

pub fn serve_service(service: Arc<RetrievalService>, addr: &str) -> Result<ServiceHandle, ServeError> {
    let listener = std::net::TcpListener::bind(addr).map_err(|source| ServeError::Bind {
        addr: addr.to_string(),
        source,
    })?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(service.clone());
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .thread_name("ragbench-retriever")
        .build()?;
    let thread = std::thread::Builder::new()
        .name("ragbench-retriever-main".into())
        .spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener)?;
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
            })
        })?;
    log::info!("retrieval service listening on {local}");
    Ok(ServiceHandle {
        addr: local,
        service,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

pub fn router(service: Arc<RetrievalService>) -> Router {
    Router::new()
        .route("/search", post(search))
        .route("/health", get(health))
        .route("/stats", get(stats))
        .with_state(service)
}

fn error_response(status: StatusCode, message: String) -> Response {
    (status, Json(serde_json::json!({ "error": message }))).into_response()
}

async fn search(State(service): State<Arc<RetrievalService>>, body: Bytes) -> Response {
    let request: SearchRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, format!("invalid request body: {e}")),
    };
    let result = tokio::task::spawn_blocking(move || service.cached_search(&request.query, request.k)).await;
    match result {
        Ok(Ok((passages, cache_hit))) => Json(SearchResponse { passages, cache_hit }).into_response(),
        Ok(Err(RetrievalError::InvalidK)) => error_response(StatusCode::BAD_REQUEST, "k must be at least 1".into()),
        Ok(Err(e)) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn health(State(service): State<Arc<RetrievalService>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        corpus_fingerprint: service.corpus_fingerprint().to_string(),
    })
}

async fn stats(State(service): State<Arc<RetrievalService>>) -> Json<StatsSummary> {
    Json(service.stats().summary())
}
