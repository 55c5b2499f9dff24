//! Command implementations and file formats behind the `posebench` binary.

pub mod checks;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod svg;
