//! File formats, configuration, threading and the command-line front end
//! for the `miqrec_core` recommender.

pub mod bench;
pub mod cache;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod fsio;
pub mod report;
pub mod threads;

pub use config::RunConfig;
pub use error::{CliError, Result};
