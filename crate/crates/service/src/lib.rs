//! HTTP API and command line over `mmds_core`.
//!
//! [`engine::Engine`] owns all mutable state; the axum routes in [`http`]
//! and the subcommands in [`cli`] are thin wrappers that serialize its
//! results unchanged.

pub mod cli;
pub mod config;
pub mod engine;
pub mod error;
pub mod http;

pub use config::EngineConfig;
pub use engine::Engine;
pub use error::{ApiError, ErrorCode};
