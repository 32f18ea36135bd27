//! Evaluation harness for multi-label CPC subclass classification of patents.
//!
//! The crate covers the full pipeline: taxonomy handling, corpus loading and
//! label statistics, sparse and dense retrieval, prompt construction, parsing
//! of free-form model output, probability decoding for encoder baselines,
//! flat and hierarchical metrics, significance testing, and cost accounting.

pub mod corpus;
pub mod costs;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod metrics;
pub mod postparse;
pub mod prompting;
pub mod retrieval;
pub mod stats;
pub mod taxonomy;

pub use error::{Error, Result};

/// Maximum number of labels kept in any prediction.
pub const PREDICTION_CAP: usize = 7;
