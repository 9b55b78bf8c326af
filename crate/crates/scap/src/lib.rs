//! File formats, dataset loading and the `scap` command line around
//! [`scap_core`].
//!
//! * [`features`]: binary `SCAPF1` feature files
//! * [`manifest`]: JSON dataset manifests
//! * [`results`]: JSON-lines per-sample results
//! * [`dataset`]: joins the two into core samples and a class catalog
//! * [`exec`]: a rayon executor
//! * [`cli`]: subcommands

pub mod cli;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod features;
pub mod manifest;
pub mod results;

pub use error::{Error, Result};
