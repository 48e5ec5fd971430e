//! Library surface of the `goco` command-line tool: config ingestion,
//! experiment orchestration, and CSV artifact emission. The binary in
//! `main.rs` is a thin dispatcher over [`commands`]; integration tests call
//! the same functions directly.

pub mod commands;
pub mod config;
pub mod error;
