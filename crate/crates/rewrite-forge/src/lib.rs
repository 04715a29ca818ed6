//! File formats, HTTP client and command line for the rewrite-forge pipeline.

pub mod analyze;
pub mod cli;
pub mod client;
pub mod config;
pub mod eval;
pub mod job;
pub mod manifest;
pub mod mix;
pub mod records;
pub mod subset;
