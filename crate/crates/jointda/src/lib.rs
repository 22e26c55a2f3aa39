//! File formats, configs, reports and the command-line runner built on
//! `jointda-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod report;
pub mod sweep;

pub use error::{Error, Result};
