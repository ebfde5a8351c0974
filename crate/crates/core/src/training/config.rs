//! Training hyperparameters and the ablation modes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{GtlError, Result};
use crate::model::{Ablation, ModelDims};

/// How the two phases are run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Phase 1 on base data, Phase 2 with the generator frozen.
    Full,
    /// No Phase 1: every module trained from scratch on the support set.
    GtlT,
    /// Like `Full` but the generator is fine-tuned in Phase 2.
    GtlFt,
    /// Classifier on raw features.
    NoZ,
    /// Generator fed `[z_c | 0]`.
    NoZm,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [
        TrainMode::Full,
        TrainMode::GtlT,
        TrainMode::GtlFt,
        TrainMode::NoZ,
        TrainMode::NoZm,
    ];

    pub fn ablation(self) -> Ablation {
        match self {
            TrainMode::NoZ => Ablation::NoZ,
            TrainMode::NoZm => Ablation::NoZm,
            TrainMode::Full | TrainMode::GtlT | TrainMode::GtlFt => Ablation::Full,
        }
    }

    pub fn freezes_generator(self) -> bool {
        !matches!(self, TrainMode::GtlT | TrainMode::GtlFt)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Full => "full",
            TrainMode::GtlT => "gtl_t",
            TrainMode::GtlFt => "gtl_ft",
            TrainMode::NoZ => "no_z",
            TrainMode::NoZm => "no_zm",
        }
    }
}

impl FromStr for TrainMode {
    type Err = GtlError;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| GtlError::Validation(format!("unknown mode '{s}'")))
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Representation epochs in Phase 1.
    pub epochs: usize,
    /// Classifier epochs, in both phases.
    pub classifier_epochs: usize,
    /// Representation epochs in Phase 2.
    pub adapt_epochs: usize,
    pub lr_repr: f64,
    pub lr_cls: f64,
    /// Learning rates are multiplied by `lr_decay` after this epoch. Stages
    /// with a different length scale it proportionally.
    pub decay_epoch: usize,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub dims: ModelDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            classifier_epochs: 60,
            adapt_epochs: 60,
            lr_repr: 1e-3,
            lr_cls: 1e-4,
            decay_epoch: 30,
            lr_decay: 0.1,
            weight_decay: 1e-4,
            lambda: 1.0,
            batch_size: 128,
            dropout: 0.5,
            seed: 0,
            mode: TrainMode::Full,
            dims: ModelDims::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epochs", self.epochs),
            ("classifier_epochs", self.classifier_epochs),
            ("adapt_epochs", self.adapt_epochs),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(GtlError::Validation(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("lr_repr", self.lr_repr), ("lr_cls", self.lr_cls)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(GtlError::Validation(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return Err(GtlError::Validation(format!("lr_decay must be positive, got {}", self.lr_decay)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(GtlError::Validation("weight_decay must be >= 0".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(GtlError::Validation("lambda must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(GtlError::Validation(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        self.dims.validate()
    }

    /// Learning rate at 1-based `epoch` of a stage lasting `stage_epochs`.
    pub fn lr_at(&self, base: f64, epoch: usize, stage_epochs: usize) -> f64 {
        let decay_after = self.decay_epoch * stage_epochs / self.epochs;
        if epoch > decay_after {
            base * self.lr_decay
        } else {
            base
        }
    }
}
