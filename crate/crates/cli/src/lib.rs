//! Configuration, orchestration and experiment drivers behind the `mixtrade` binary.

pub mod commands;
pub mod config;
pub mod experiments;
pub mod pipeline;
