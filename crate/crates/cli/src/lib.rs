//! Command implementations and the HTTP recognition service behind the
//! `radseq` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod service;

pub use error::CliError;
