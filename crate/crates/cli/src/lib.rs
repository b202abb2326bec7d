//! Command-line and HTTP front ends for the `texid` pipeline.

pub mod cli;
pub mod config;
pub mod error;
pub mod server;
pub mod service;

pub use error::{ApiError, ErrorCode};

/// Ranking length when a search request does not give one.
pub const DEFAULT_K: usize = 5;
