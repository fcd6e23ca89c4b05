//! Library surface behind the `ddc` binary: configuration, checkpoint and
//! dataset handling, and the command implementations.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
