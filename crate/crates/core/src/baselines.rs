//! Single-machine comparison learners.
//!
//! [`Oml`] runs the same coupled multitask update as the distributed system
//! with one sample per step and no delay. [`Ol`] ignores task identity and
//! fits one shared logistic model.

use crate::math::{
    compound_gradient, descend, logistic_factor, predict, CompoundInstance, CompoundWeight,
    HyperParams, InteractionMatrix, Label, MathError,
};
use crate::worker::Prediction;

#[derive(Debug, Clone)]
pub struct Oml {
    weight: CompoundWeight,
    hp: HyperParams,
    inverse: InteractionMatrix,
    mistakes: Vec<u64>,
    seen: Vec<u64>,
    predictions: Vec<Prediction>,
}

impl Oml {
    pub fn new(k: usize, d: usize, hp: HyperParams) -> Result<Self, MathError> {
        hp.validate()?;
        Ok(Self {
            weight: CompoundWeight::zeros(k, d),
            inverse: InteractionMatrix::inverse(k, hp.b)?,
            hp,
            mistakes: vec![0; k],
            seen: vec![0; k],
            predictions: Vec::new(),
        })
    }

    pub fn weight(&self) -> &CompoundWeight {
        &self.weight
    }

    pub fn mistakes(&self) -> &[u64] {
        &self.mistakes
    }

    pub fn seen(&self) -> &[u64] {
        &self.seen
    }

    pub fn predictions(&self) -> &[Prediction] {
        &self.predictions
    }

    pub fn take_predictions(&mut self) -> Vec<Prediction> {
        std::mem::take(&mut self.predictions)
    }

    /// Predict, count, then `w <- project(w - eta * grad, R)`.
    pub fn step(&mut self, seq: u64, inst: &CompoundInstance) -> Result<(), MathError> {
        inst.validate(self.weight.tasks(), self.weight.dim())?;
        let mistake = predict(&self.weight, inst) != inst.label;
        self.seen[inst.task] += 1;
        self.mistakes[inst.task] += u64::from(mistake);
        self.predictions.push(Prediction {
            seq,
            task: inst.task,
            mistake,
            model_version: self.weight.version(),
        });

        let grad = compound_gradient(&self.weight, inst, &self.inverse, self.hp.lambda)?;
        let round = self.weight.version() + 1;
        self.weight = descend(
            &self.weight,
            &grad,
            self.hp.step_size(round),
            self.hp.radius,
            round,
        )?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Ol {
    weight: Vec<f64>,
    eta: f64,
    lambda: f64,
    radius: f64,
    mistakes: Vec<u64>,
    seen: Vec<u64>,
    predictions: Vec<Prediction>,
    steps: u64,
}

impl Ol {
    /// Shares `eta` and `lambda` with `hp`; projection is off.
    pub fn new(k: usize, d: usize, hp: &HyperParams) -> Result<Self, MathError> {
        hp.validate()?;
        Ok(Self {
            weight: vec![0.0; d],
            eta: hp.eta,
            lambda: hp.lambda,
            radius: f64::INFINITY,
            mistakes: vec![0; k],
            seen: vec![0; k],
            predictions: Vec::new(),
            steps: 0,
        })
    }

    pub fn with_projection(mut self, radius: f64) -> Self {
        self.radius = radius;
        self
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn mistakes(&self) -> &[u64] {
        &self.mistakes
    }

    pub fn seen(&self) -> &[u64] {
        &self.seen
    }

    pub fn predictions(&self) -> &[Prediction] {
        &self.predictions
    }

    pub fn take_predictions(&mut self) -> Vec<Prediction> {
        std::mem::take(&mut self.predictions)
    }

    pub fn step(&mut self, seq: u64, inst: &CompoundInstance) -> Result<(), MathError> {
        if inst.features.len() != self.weight.len() {
            return Err(MathError::DimensionMismatch {
                expected: self.weight.len(),
                found: inst.features.len(),
            });
        }
        if inst.task >= self.seen.len() {
            return Err(MathError::TaskOutOfRange {
                task: inst.task,
                k: self.seen.len(),
            });
        }
        let m: f64 = self.weight.iter().zip(&inst.features).map(|(v, x)| v * x).sum();
        let mistake = Label::from_sign(m) != inst.label;
        self.seen[inst.task] += 1;
        self.mistakes[inst.task] += u64::from(mistake);
        self.predictions.push(Prediction {
            seq,
            task: inst.task,
            mistake,
            model_version: self.steps,
        });

        let factor = logistic_factor(inst.label, m);
        for (v, x) in self.weight.iter_mut().zip(&inst.features) {
            *v -= self.eta * (factor * x + self.lambda * *v);
        }
        let norm = self.weight.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > self.radius {
            let s = self.radius / norm;
            self.weight.iter_mut().for_each(|v| *v *= s);
        }
        self.steps += 1;
        Ok(())
    }
}
