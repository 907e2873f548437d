//! Synthetic task family: rotated Fourier-series decision boundaries whose
//! parameters follow a Gaussian random walk from task to task.

use std::f64::consts::FRAC_PI_4;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{CompoundInstance, Label};
use crate::rng::{tags, SplitMix64};

/// Width of the lifted feature vector.
pub const FEATURE_DIM: usize = 9;
/// Raw inputs are drawn from `[-SQUARE, SQUARE]^2`.
pub const SQUARE: f64 = 3.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("task family needs at least one task")]
    ZeroTasks,
    #[error("sigma must be finite and non-negative, got {0}")]
    BadSigma(f64),
    #[error("task index {task} out of range for a family of {k}")]
    TaskOutOfRange { task: usize, k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    /// Phase followed by four Fourier coefficients.
    pub a: [f64; 5],
    pub theta: f64,
}

impl TaskParams {
    pub const ORIGIN: TaskParams = TaskParams {
        a: [0.0, 1.0, 1.0, 1.0, 1.0],
        theta: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFamily {
    pub tasks: Vec<TaskParams>,
    pub sigma: f64,
    pub seed: u64,
}

impl TaskFamily {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task(&self, index: usize) -> Result<&TaskParams, SynthError> {
        self.tasks.get(index).ok_or(SynthError::TaskOutOfRange {
            task: index,
            k: self.tasks.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawPoint {
    pub x1: f64,
    pub x2: f64,
}

impl RawPoint {
    pub fn new(x1: f64, x2: f64) -> Self {
        Self { x1, x2 }
    }

    pub fn norm(&self) -> f64 {
        self.x1.hypot(self.x2)
    }
}

/// Random walk from [`TaskParams::ORIGIN`]: each step adds `N(0, sigma^2)` to
/// every coefficient and `N(0, (sigma * pi/4)^2)` to the angle.
pub fn generate_family(k: usize, sigma: f64, seed: u64) -> Result<TaskFamily, SynthError> {
    if k == 0 {
        return Err(SynthError::ZeroTasks);
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(SynthError::BadSigma(sigma));
    }
    let mut rng = SplitMix64::substream(seed, tags::FAMILY, 0);
    let mut tasks = Vec::with_capacity(k);
    let mut current = TaskParams::ORIGIN;
    tasks.push(current);
    for _ in 1..k {
        for a in current.a.iter_mut() {
            *a += sigma * rng.normal();
        }
        current.theta += sigma * FRAC_PI_4 * rng.normal();
        tasks.push(current);
    }
    Ok(TaskFamily { tasks, sigma, seed })
}

pub fn boundary_h(x: f64, a: &[f64; 5]) -> f64 {
    let u = x - a[0];
    a[1] * u.sin() + a[2] * (2.0 * u).sin() + a[3] * u.cos() + a[4] * (2.0 * u).cos()
}

/// Counterclockwise rotation by `theta` radians.
pub fn rotate(p: RawPoint, theta: f64) -> RawPoint {
    let (s, c) = theta.sin_cos();
    RawPoint {
        x1: p.x1 * c - p.x2 * s,
        x2: p.x1 * s + p.x2 * c,
    }
}

pub fn label_point(p: RawPoint, task: &TaskParams) -> Label {
    let r = rotate(p, task.theta);
    Label::from_sign(r.x2 - boundary_h(r.x1, &task.a))
}

/// `(x1, x2, x1 x2, x1^2, x2^2, x1^3, x2^3, x1 x2^2, x1^2 x2)`.
pub fn lift_features(p: RawPoint) -> [f64; FEATURE_DIM] {
    let RawPoint { x1, x2 } = p;
    [
        x1,
        x2,
        x1 * x2,
        x1 * x1,
        x2 * x2,
        x1 * x1 * x1,
        x2 * x2 * x2,
        x1 * x2 * x2,
        x1 * x1 * x2,
    ]
}

/// Lazily generated labeled samples of one task.
#[derive(Debug, Clone)]
pub struct SampleStream {
    task_index: usize,
    params: TaskParams,
    rng: SplitMix64,
}

impl SampleStream {
    pub fn new(family: &TaskFamily, task: usize, seed: u64) -> Result<Self, SynthError> {
        Ok(Self {
            task_index: task,
            params: *family.task(task)?,
            rng: SplitMix64::substream(seed, tags::SAMPLE, task as u64),
        })
    }

    pub fn next_point(&mut self) -> RawPoint {
        let x1 = self.rng.uniform(-SQUARE, SQUARE);
        let x2 = self.rng.uniform(-SQUARE, SQUARE);
        RawPoint { x1, x2 }
    }
}

impl Iterator for SampleStream {
    type Item = CompoundInstance;

    fn next(&mut self) -> Option<CompoundInstance> {
        let p = self.next_point();
        Some(CompoundInstance::new(
            self.task_index,
            lift_features(p).to_vec(),
            label_point(p, &self.params),
        ))
    }
}

pub fn sample_stream(
    family: &TaskFamily,
    task: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<CompoundInstance>, SynthError> {
    Ok(SampleStream::new(family, task, seed)?.take(n).collect())
}
