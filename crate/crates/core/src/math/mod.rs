//! Numeric primitives of the multitask learner.
//!
//! The model is a compound vector of `K` task blocks of length `d`. Task
//! coupling is expressed by the uniform interaction matrix family, which is
//! only ever stored as its two closed-form scalars; the Kronecker lift
//! `A ⊗ I` is realized blockwise and never materialized.

mod gradient;
mod interaction;
mod objective;
mod weight;

pub use gradient::{assemble_direction, descend, project, raw_buffer_gradient, SparseGradient};
pub use interaction::{InteractionKind, InteractionMatrix};
pub use objective::{
    compound_gradient, empirical_risk, instance_loss, kernel_product, logistic_factor,
    logistic_loss, margin, predict,
};
pub use weight::CompoundWeight;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack allowed above the projection radius before a weight is rescaled.
pub const PROJECTION_SLACK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("task count must be at least 1")]
    ZeroTasks,
    #[error("interaction parameter must be non-negative, got {0}")]
    NegativeInteraction(f64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("task index {task} out of range for {k} tasks")]
    TaskOutOfRange { task: usize, k: usize },
    #[error("expected a {expected:?} interaction matrix")]
    WrongKind { expected: InteractionKind },
    #[error("gradient buffer is empty")]
    EmptyBuffer,
    #[error("dataset is empty")]
    EmptyData,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid hyperparameter `{name}`: {reason}")]
    InvalidHyperParam { name: &'static str, reason: String },
}

/// Binary class label, serialized as -1 / 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "i8", into = "i8")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn value(self) -> f64 {
        match self {
            Label::Negative => -1.0,
            Label::Positive => 1.0,
        }
    }

    /// Sign with `sign(0) = +1`.
    pub fn from_sign(x: f64) -> Self {
        if x >= 0.0 {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn flip(self) -> Self {
        match self {
            Label::Negative => Label::Positive,
            Label::Positive => Label::Negative,
        }
    }
}

impl TryFrom<i8> for Label {
    type Error = String;

    fn try_from(v: i8) -> Result<Self, Self::Error> {
        match v {
            -1 => Ok(Label::Negative),
            1 => Ok(Label::Positive),
            other => Err(format!("label must be -1 or 1, got {other}")),
        }
    }
}

impl From<Label> for i8 {
    fn from(l: Label) -> i8 {
        match l {
            Label::Negative => -1,
            Label::Positive => 1,
        }
    }
}

/// One labeled sample of one task. Only the task's own block of the compound
/// representation is stored; every other block is implicitly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompoundInstance {
    pub task: usize,
    pub features: Vec<f64>,
    pub label: Label,
}

impl CompoundInstance {
    pub fn new(task: usize, features: Vec<f64>, label: Label) -> Self {
        Self {
            task,
            features,
            label,
        }
    }

    pub fn validate(&self, k: usize, d: usize) -> Result<(), MathError> {
        if self.task >= k {
            return Err(MathError::TaskOutOfRange { task: self.task, k });
        }
        if self.features.len() != d {
            return Err(MathError::DimensionMismatch {
                expected: d,
                found: self.features.len(),
            });
        }
        if !self.features.iter().all(|x| x.is_finite()) {
            return Err(MathError::NonFinite("instance features"));
        }
        Ok(())
    }
}

/// Step-size schedule. The experiments use a constant rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    #[default]
    Constant,
    /// `eta / sqrt(round)`.
    InverseSqrt,
}

impl StepSchedule {
    pub fn rate(self, eta: f64, round: u64) -> f64 {
        match self {
            StepSchedule::Constant => eta,
            StepSchedule::InverseSqrt => eta / (round.max(1) as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub eta: f64,
    pub lambda: f64,
    pub b: f64,
    pub radius: f64,
    pub buffer: usize,
    pub tau_max: u64,
    pub schedule: StepSchedule,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            eta: 0.01,
            lambda: 0.001,
            b: 6.0,
            radius: 10.0,
            buffer: 10,
            tau_max: 8,
            schedule: StepSchedule::Constant,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), MathError> {
        fn bad(name: &'static str, reason: &str) -> Result<(), MathError> {
            Err(MathError::InvalidHyperParam {
                name,
                reason: reason.to_string(),
            })
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return bad("eta", "must be a finite positive number");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda", "must be finite and non-negative");
        }
        if !(self.b.is_finite() && self.b >= 0.0) {
            return bad("b", "must be finite and non-negative");
        }
        // Infinite radius disables projection.
        if self.radius.is_nan() || self.radius <= 0.0 {
            return bad("radius", "must be positive");
        }
        if self.buffer == 0 {
            return bad("buffer", "must be at least 1");
        }
        Ok(())
    }

    pub fn step_size(&self, round: u64) -> f64 {
        self.schedule.rate(self.eta, round)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_sign_convention() {
        assert_eq!(Label::from_sign(7.0), Label::Positive);
        assert_eq!(Label::from_sign(-0.3), Label::Negative);
        assert_eq!(Label::from_sign(0.0), Label::Positive);
        assert_eq!(Label::from_sign(-0.0), Label::Positive);
    }

    #[test]
    fn label_serde() {
        assert_eq!(serde_json::to_string(&Label::Negative).unwrap(), "-1");
        assert_eq!(serde_json::from_str::<Label>("1").unwrap(), Label::Positive);
        assert!(serde_json::from_str::<Label>("0").is_err());
    }

    #[test]
    fn hyperparams_validation() {
        assert!(HyperParams::default().validate().is_ok());
        let hp = HyperParams {
            eta: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            hp.validate(),
            Err(MathError::InvalidHyperParam { name: "eta", .. })
        ));
        let hp = HyperParams {
            buffer: 0,
            ..Default::default()
        };
        assert!(hp.validate().is_err());
        let hp = HyperParams {
            radius: f64::INFINITY,
            ..Default::default()
        };
        assert!(hp.validate().is_ok());
    }

    #[test]
    fn instance_validation() {
        let inst = CompoundInstance::new(2, vec![1.0, 2.0], Label::Positive);
        assert!(inst.validate(3, 2).is_ok());
        assert_eq!(
            inst.validate(2, 2),
            Err(MathError::TaskOutOfRange { task: 2, k: 2 })
        );
        assert!(inst.validate(3, 3).is_err());
        let nan = CompoundInstance::new(0, vec![f64::NAN], Label::Positive);
        assert!(nan.validate(1, 1).is_err());
    }

    #[test]
    fn schedule_defaults_to_constant() {
        let hp = HyperParams::default();
        assert_eq!(hp.step_size(1), 0.01);
        assert_eq!(hp.step_size(1000), 0.01);
        assert_eq!(StepSchedule::InverseSqrt.rate(1.0, 4), 0.5);
    }
}
