//! Modular retrieval-augmented generation benchmarking engine.
//!
//! The pieces compose as: [`corpus`] → [`index`] → [`service`] (cached,
//! shareable retrieval) → [`algorithms`] (driving a [`generator`] with
//! [`instruction`] templates) → [`eval`] (datasets, metrics, reports).
//! [`config`] wires a run together from one YAML file.

pub mod corpus;
pub mod digest;
pub mod generator;
mod http_util;
pub mod index;
pub mod retriever;
pub mod service;

pub use http_util::RetryPolicy;
pub mod algorithms;
pub mod config;
mod error;
pub mod eval;
pub mod instruction;
pub mod pipeline;

pub use error::Error;
