//! Operational shell around `gate-core`: HTTP API, file store, survey,
//! and the batch jobs behind the `gate` binary.

pub mod api;
pub mod clock;
pub mod config;
pub mod ingest;
pub mod reports;
pub mod results;
pub mod store;
pub mod survey;
