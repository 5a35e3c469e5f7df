//! Gated depthwise-residual attention blocks for pose-robust feature
//! learning, with exact parameter/MAC accounting and a toy training harness.
//!
//! The library is organized as:
//! - [`tensor`]: dense f64 tensors with reverse-mode differentiation and a
//!   finite-difference gradient checker;
//! - [`blocks`]: the soft gate, depthwise residual module (DRM), channel
//!   attention module (CAM), their composition (PAM), and the embedding-space
//!   baseline (DREAM);
//! - [`backbone`]: a 4-stage residual backbone with PAM insertion at stage
//!   ends and a bit-exact checkpoint format;
//! - [`accounting`]: trainable-parameter and multiply-accumulate counting;
//! - [`harness`]: synthetic pose-skewed data, angular-margin loss, SGD
//!   training, and verification-style evaluation;
//! - [`config`]: strict run configuration for the CLI.

pub mod accounting;
pub mod backbone;
pub mod blocks;
pub mod config;
mod error;
pub mod gradsuite;
pub mod harness;
pub mod tensor;

pub use error::{Error, Result};
