//! Review-comment fix service: an event-sourced pipeline behind a JSON API,
//! plus the `crfix` command-line front end.

pub mod cli;
pub mod config;
pub mod http;
pub mod service;
pub mod store;

pub use config::PipelineConfig;
pub use service::{Service, ServiceError, SuggestionView, UserAction};
pub use store::{rebuild_projection, CommentStatus, Projection, Stage};
