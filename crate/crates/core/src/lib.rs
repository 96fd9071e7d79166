//! Multiple-choice answer selection over long documents.
//!
//! Documents are split into sentence-aligned chunks, ranked by TF-IDF against
//! the question, and read by a tri-attention scorer that produces one score
//! per (candidate, chunk). Heads turn the score matrix into a distribution
//! over candidates, optionally normalizing globally across chunks with
//! per-chunk weights.

pub mod compute;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod heads;
pub mod model;
pub mod pipeline;
pub mod retrieval;
pub mod run;
pub mod text;
pub mod train;

pub use error::{Error, Result};
