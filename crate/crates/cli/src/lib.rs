//! Library side of the `boq` command-line tool.

pub mod commands;
pub mod config;
