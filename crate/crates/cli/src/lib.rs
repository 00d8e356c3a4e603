//! Config loading and the experiment commands behind the `samg` binary.

pub mod commands;
pub mod config;
