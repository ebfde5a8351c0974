//! Deterministic dense-algebra kernel: matrices, layer forward/backward
//! passes, losses, Adam, seeded randomness and a finite-difference checker.
//!
//! Everything runs in `f64` on a single thread so results are bit-stable.

pub mod gradcheck;
pub mod layers;
pub mod loss;
mod matrix;
pub mod optim;
mod rng;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use layers::{BatchNormState, Mode};
pub use matrix::Matrix;
pub use optim::{adam_step, AdamState, Param, ParamGroup, StepOutcome};
pub use rng::{RngState, SeededRng};
