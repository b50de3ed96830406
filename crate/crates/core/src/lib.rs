//! Cross-domain feature fusion for EEG emotion recognition.
//!
//! The crate is `no_std` (it needs `alloc`) and contains every numerical
//! piece of the pipeline: windowing and differential-entropy features, the
//! KNN channel graph, a small reverse-mode autodiff tape with the layers the
//! model needs, the time-frequency (TDEE) and spatial (SDEE) encoders, the
//! cross-domain attention (CDA) block with two-step fusion, and the
//! training / leave-one-subject-out evaluation loop.
//!
//! File formats, the CLI and anything touching the filesystem live in the
//! `eegfuse` crate.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod dataset;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod model;
pub mod nn;
pub mod signal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
