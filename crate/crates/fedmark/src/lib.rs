//! Desk-scale simulator of federated data provenance for language models.
//!
//! Clients watermark synthetic training text, a federated loop fine-tunes a
//! shared toy language model, and the server either averages updates or
//! applies strong Byzantine-robust filtering. The crate measures watermark
//! radioactivity (p-values), filtering robustness (ER/OFR), and model
//! utility (held-out cross-entropy).

pub mod agg;
pub mod bench;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod fedsim;
pub mod lm;
pub mod metrics;
pub mod optim;
pub mod report;
pub mod rng;
pub mod watermark;

pub use error::{Error, Result};
