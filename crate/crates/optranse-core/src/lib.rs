//! Knowledge-graph completion with order-preserving relation-path embeddings.
//!
//! The crate is organized along the pipeline:
//!
//! - [`kg`] loads and indexes triple data, adds reverse relations, and
//!   provides Bernoulli corruption sampling and relation categories.
//! - [`path`] enumerates bounded-length relation paths, scores their
//!   reliability by resource allocation, counts path/relation co-occurrence
//!   statistics, and caches per-triple path sets on disk.
//! - [`model`] holds entity/relation vectors and per-relation projection
//!   matrices, and computes ordered-path energies with two-level min-pooling.
//! - [`train`] optimizes the margin-ranking objective by SGD with norm
//!   constraints and relation-only path updates.
//! - [`eval`] ranks candidate entities for held-out triples and reports
//!   raw/filtered Mean Rank and Hits@k with a relation-category breakdown.
//!
//! All randomness flows from a single seed; single-worker runs are bitwise
//! reproducible.

pub mod config;
pub mod error;
pub mod eval;
pub mod fingerprint;
pub mod kg;
pub mod model;
pub mod path;
pub mod train;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
