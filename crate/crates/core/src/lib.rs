//! Core of the review-comment fix pipeline.
//!
//! - [`patch`]: line-diff patches, application, exact match, applied detection
//! - [`classify`]: actionability and pair-quality classifiers, metrics
//! - [`backend`], [`generate`]: model backends and patch generation
//! - [`validate`]: lint/test/build checks and the show gate
//! - [`funnel`]: suggestion lifecycle and funnel counts
//! - [`eval`]: offline Exact Match / Successful Patch Generation harness
//! - [`curation`]: training-pair ingestion, filtering and export
//! - [`stats`], [`experiment`]: significance tests and experiment reports

pub mod backend;
pub mod classify;
pub mod curation;
pub mod eval;
pub mod experiment;
pub mod funnel;
pub mod generate;
pub mod patch;
pub mod stats;
pub mod validate;

pub use classify::ReviewComment;
pub use patch::{LineDiffPatch, SourceFile};
