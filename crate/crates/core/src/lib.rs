//! Supportive-clique attribute prompting for transductive test-time adaptation.
//!
//! The crate is `no_std` and only needs `alloc`. Everything here is pure
//! computation over in-memory data: clique mining on per-class similarity
//! matrices, per-clique prompt learning with analytic gradients and Adam,
//! cross-batch retention (running-mean text prompt and a bounded per-class
//! key-value cache compacted by graph propagation and closest-pair fusion),
//! and composed-prompt inference. File formats and the command line live in
//! the `scap` crate.
//!
//! A toy differentiable encoder pair stands in for a real vision-language
//! backbone, see [`model`].
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod clique;
pub mod error;
pub mod exec;
pub mod inference;
pub mod learner;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod retention;
pub mod synthetic;

pub use error::{Error, Result};
pub use exec::{Executor, Sequential};
pub use model::{ClassCatalog, EncoderMode, EncoderParams, ImageSample, PromptTokens, SampleInput};
pub use numeric::{Matrix, Vector};
pub use pipeline::{Engine, RunConfig, RunMetrics};
