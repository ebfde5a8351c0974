//! Generative transfer learning for cross-modal few-shot classification.
//!
//! A variational model splits each feature vector into a class-intrinsic
//! concept `z_c` and an in-modality disturbance `z_m`. The model is trained
//! on abundant single-modality base classes, then adapted to novel
//! multi-modal classes with the generator frozen.
//!
//! Modules:
//! - [`numerics`]: matrices, layer kernels, losses, Adam, gradient checking
//! - [`model`]: the network, its losses and the checkpoint format
//! - [`training`]: base training, novel adaptation and prediction
//! - [`data`]: feature files, splits, episode sampling, synthetic data
//! - [`eval`]: top-1 accuracy and episode aggregation
//! - [`cli`]: the `gtl` command-line tool

mod binio;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{GtlError, Result};
