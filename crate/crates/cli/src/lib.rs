//! Command-line orchestration of the recommendation pipeline.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod seeds;
