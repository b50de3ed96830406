//! File formats and command-line plumbing around `eegfuse-core`: the `.nft`
//! tensor container, recording bundles, feature caches, checkpoints,
//! `key = value` configs and result reports.

pub mod bundle;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod container;
pub mod error;
pub mod features;
pub mod report;

pub use error::{Error, Result};
