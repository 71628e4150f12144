//! File formats, config and subcommands for the `xmrt` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod tables;
pub mod tensor;
