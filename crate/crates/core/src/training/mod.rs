//! Two-phase training: representation and classifier on the base set, then
//! adaptation to a novel support set with the generator frozen.

mod config;
mod phases;

pub use config::{TrainConfig, TrainMode};
pub use phases::{
    adapt_phase2, classifier_features, params_checksum, predict, train_phase1, EpochRecord,
    PhaseReport,
};
