//! Command-line front end: config loading, subcommand orchestration, run
//! manifests and the review API.

pub mod app;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod serve;
