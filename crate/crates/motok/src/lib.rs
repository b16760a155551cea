//! File formats, run configuration and batch commands around `motok-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod motk;
pub mod report;
pub mod tokens;

pub use error::{MotokError, Result};
