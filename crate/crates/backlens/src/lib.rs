//! File formats, reports and the `backlens` command line on top of
//! `backlens-core`.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod corpus_io;
pub mod error;
pub mod report;

pub use error::{Error, Result};
