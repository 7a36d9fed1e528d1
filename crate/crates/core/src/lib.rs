//! Yara rule synthesis from small sets of related binaries.
//!
//! The pipeline extracts large byte n-grams shared by the input samples,
//! removes grams that are padding-like, low-entropy, or common in a background
//! corpus, biclusters samples against the surviving grams, and turns each
//! bicluster into a `t of (...)` clause of a Yara rule.

pub mod corpus;
pub mod error;
pub mod ngram;
pub mod bloom_index;
pub mod feature_filter;
pub mod bicluster;
pub mod rulegen;
pub mod ruleval;

pub use error::{Error, Result};
