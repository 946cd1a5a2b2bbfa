//! File formats, experiment pipelines and the `convdr` command line on top
//! of `convdr-core`.

pub mod binary;
pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod repl;

pub use error::{Error, Result};
