//! Data ingestion, run configuration, file formats and drivers behind the
//! `moelab` command-line tool.

pub mod checkpoint;
pub mod config;
pub mod corpus;
mod error;
pub mod report;
pub mod run;
pub mod runlog;
pub mod sim;
pub mod trace;

pub use config::RunConfig;
pub use corpus::{load_corpus, Corpus};
pub use error::{HarnessError, Result};
