//! Library surface of the CLI so integration tests can drive commands
//! without spawning the binary.

pub mod commands;
pub mod config;
