use std::collections::BTreeMap;

use serde::Serialize;

use super::{
    logistic_factor, margin, CompoundInstance, CompoundWeight, InteractionKind, InteractionMatrix,
    MathError, PROJECTION_SLACK,
};

/// Buffer-averaged logistic gradient as transmitted by a worker: one block per
/// task that appeared in the buffer, before the interaction inverse and the
/// regularizer are applied.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparseGradient {
    k: usize,
    d: usize,
    blocks: BTreeMap<usize, Vec<f64>>,
    samples: usize,
    basis_version: u64,
    worker: usize,
}

impl SparseGradient {
    pub fn new(
        k: usize,
        d: usize,
        blocks: BTreeMap<usize, Vec<f64>>,
        samples: usize,
        basis_version: u64,
        worker: usize,
    ) -> Result<Self, MathError> {
        if k == 0 {
            return Err(MathError::ZeroTasks);
        }
        if samples == 0 {
            return Err(MathError::EmptyBuffer);
        }
        for (&task, blk) in &blocks {
            if task >= k {
                return Err(MathError::TaskOutOfRange { task, k });
            }
            if blk.len() != d {
                return Err(MathError::DimensionMismatch {
                    expected: d,
                    found: blk.len(),
                });
            }
            if !blk.iter().all(|x| x.is_finite()) {
                return Err(MathError::NonFinite("gradient block"));
            }
        }
        Ok(Self {
            k,
            d,
            blocks,
            samples,
            basis_version,
            worker,
        })
    }

    pub fn tasks(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn basis_version(&self) -> u64 {
        self.basis_version
    }

    pub fn worker(&self) -> usize {
        self.worker
    }

    pub fn block(&self, task: usize) -> Option<&[f64]> {
        self.blocks.get(&task).map(Vec::as_slice)
    }

    /// Number of stored (possibly nonzero) blocks.
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Task indices of the stored blocks, ascending.
    pub fn support(&self) -> Vec<usize> {
        self.blocks.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.blocks.iter().map(|(&t, b)| (t, b.as_slice()))
    }

    pub fn into_blocks(self) -> BTreeMap<usize, Vec<f64>> {
        self.blocks
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.k * self.d];
        for (t, blk) in self.iter() {
            out[t * self.d..(t + 1) * self.d].copy_from_slice(blk);
        }
        out
    }
}

/// Averages `factor(y_s, w^T phi_s) * x_s` over the buffer into the blocks of
/// the tasks present. No interaction inverse and no regularizer: the master
/// adds both.
pub fn raw_buffer_gradient(
    w: &CompoundWeight,
    buffer: &[CompoundInstance],
    worker: usize,
) -> Result<SparseGradient, MathError> {
    if buffer.is_empty() {
        return Err(MathError::EmptyBuffer);
    }
    let mut blocks: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for inst in buffer {
        inst.validate(w.tasks(), w.dim())?;
        let factor = logistic_factor(inst.label, margin(w, inst));
        match blocks.get_mut(&inst.task) {
            Some(blk) => blk
                .iter_mut()
                .zip(&inst.features)
                .for_each(|(b, x)| *b += factor * x),
            None => {
                blocks.insert(inst.task, inst.features.iter().map(|x| factor * x).collect());
            }
        }
    }
    let m = buffer.len() as f64;
    for blk in blocks.values_mut() {
        blk.iter_mut().for_each(|b| *b /= m);
    }
    SparseGradient::new(w.tasks(), w.dim(), blocks, buffer.len(), w.version(), worker)
}

/// `(A^-1 ⊗ I) g + lambda * w_stale`.
pub fn assemble_direction(
    inverse: &InteractionMatrix,
    g: &SparseGradient,
    lambda: f64,
    w_stale: &CompoundWeight,
) -> Result<Vec<f64>, MathError> {
    inverse.expect_kind(InteractionKind::Inverse)?;
    w_stale.check_shape(g.tasks(), g.dim())?;
    let mut dir = inverse.apply(g)?;
    dir.iter_mut()
        .zip(w_stale.as_slice())
        .for_each(|(v, w)| *v += lambda * w);
    Ok(dir)
}

/// Scales `w` onto the Euclidean ball of radius `radius` when it lies outside.
/// Norms within `PROJECTION_SLACK` of the radius are left untouched, which
/// makes the map exactly idempotent.
pub fn project(mut w: CompoundWeight, radius: f64) -> CompoundWeight {
    let norm = w.norm();
    if norm > radius + PROJECTION_SLACK {
        w.scale_in_place(radius / norm);
    }
    w
}

/// `project(w - eta * direction, radius)`, stamped with `version`.
pub fn descend(
    w: &CompoundWeight,
    direction: &[f64],
    eta: f64,
    radius: f64,
    version: u64,
) -> Result<CompoundWeight, MathError> {
    if direction.len() != w.as_slice().len() {
        return Err(MathError::DimensionMismatch {
            expected: w.as_slice().len(),
            found: direction.len(),
        });
    }
    let mut next = w.clone();
    next.data_mut()
        .iter_mut()
        .zip(direction)
        .for_each(|(x, g)| *x -= eta * g);
    next.set_version(version);
    if !next.is_finite() {
        return Err(MathError::NonFinite("updated weight"));
    }
    Ok(project(next, radius))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Label;

    fn inst(task: usize, x: Vec<f64>, y: Label) -> CompoundInstance {
        CompoundInstance::new(task, x, y)
    }

    #[test]
    fn single_sample_buffer() {
        let w = CompoundWeight::from_blocks(&[vec![0.5, -1.0], vec![0.0, 0.0]], 3).unwrap();
        let i = inst(0, vec![1.0, 2.0], Label::Negative);
        let g = raw_buffer_gradient(&w, std::slice::from_ref(&i), 4).unwrap();
        let f = logistic_factor(Label::Negative, -1.5);
        assert_eq!(g.block(0).unwrap(), &[f, 2.0 * f]);
        assert_eq!(g.block_count(), 1);
        assert_eq!(g.basis_version(), 3);
        assert_eq!(g.worker(), 4);
        assert_eq!(g.samples(), 1);
    }

    #[test]
    fn same_task_buffer_has_one_block() {
        let w = CompoundWeight::zeros(5, 2);
        let buf: Vec<_> = (0..7)
            .map(|s| inst(3, vec![s as f64, 1.0], Label::Positive))
            .collect();
        let g = raw_buffer_gradient(&w, &buf, 0).unwrap();
        assert_eq!(g.support(), vec![3]);
        assert_eq!(g.samples(), 7);
    }

    #[test]
    fn two_task_hand_example() {
        let w = CompoundWeight::zeros(2, 2);
        let buf = vec![
            inst(0, vec![4.0, -8.0], Label::Positive),
            inst(1, vec![2.0, 12.0], Label::Positive),
        ];
        let g = raw_buffer_gradient(&w, &buf, 0).unwrap();
        assert_eq!(g.block(0).unwrap(), &[-1.0, 2.0]);
        assert_eq!(g.block(1).unwrap(), &[-0.5, -3.0]);
    }

    #[test]
    fn empty_buffer_is_rejected() {
        let w = CompoundWeight::zeros(2, 2);
        assert_eq!(raw_buffer_gradient(&w, &[], 0), Err(MathError::EmptyBuffer));
    }

    #[test]
    fn invalid_instance_is_rejected() {
        let w = CompoundWeight::zeros(2, 2);
        assert!(raw_buffer_gradient(&w, &[inst(2, vec![1.0, 1.0], Label::Positive)], 0).is_err());
    }

    #[test]
    fn assemble_examples() {
        let inv = InteractionMatrix::inverse(2, 1.0).unwrap();
        let zero_g = SparseGradient::new(2, 2, BTreeMap::new(), 1, 0, 0).unwrap();
        let w = CompoundWeight::from_blocks(&[vec![1.0, 2.0], vec![-4.0, 8.0]], 0).unwrap();

        let dir = assemble_direction(&inv, &zero_g, 0.0, &w).unwrap();
        assert_eq!(dir, vec![0.0; 4]);

        let dir = assemble_direction(&inv, &zero_g, 0.5, &w).unwrap();
        assert_eq!(dir, vec![0.5, 1.0, -2.0, 4.0]);

        let mut blocks = BTreeMap::new();
        blocks.insert(0, vec![4.0, -4.0]);
        let g = SparseGradient::new(2, 2, blocks, 1, 0, 0).unwrap();
        let dir = assemble_direction(&inv, &g, 0.0, &w).unwrap();
        assert_eq!(dir, vec![3.0, -3.0, 1.0, -1.0]);
    }

    #[test]
    fn assemble_rejects_mismatch() {
        let inv = InteractionMatrix::inverse(2, 1.0).unwrap();
        let g = SparseGradient::new(2, 2, BTreeMap::new(), 1, 0, 0).unwrap();
        let w = CompoundWeight::zeros(2, 3);
        assert!(assemble_direction(&inv, &g, 0.1, &w).is_err());
    }

    #[test]
    fn projection_examples() {
        let inside = CompoundWeight::from_blocks(&[vec![3.0, 4.0]], 0).unwrap();
        assert_eq!(project(inside.clone(), 10.0), inside);

        let outside = CompoundWeight::from_blocks(&[vec![12.0], vec![16.0]], 0).unwrap();
        let p = project(outside, 10.0);
        assert_eq!(p.as_slice(), &[6.0, 8.0]);

        let zero = CompoundWeight::zeros(3, 3);
        assert_eq!(project(zero.clone(), 0.5), zero);
    }

    #[test]
    fn sparse_gradient_rejects_bad_blocks() {
        let mut blocks = BTreeMap::new();
        blocks.insert(5, vec![1.0]);
        assert!(SparseGradient::new(3, 1, blocks, 1, 0, 0).is_err());
        assert!(SparseGradient::new(3, 1, BTreeMap::new(), 0, 0, 0).is_err());
    }

    #[test]
    fn descend_applies_step_and_version() {
        let w = CompoundWeight::from_blocks(&[vec![1.0, 1.0]], 2).unwrap();
        let next = descend(&w, &[10.0, -10.0], 0.1, f64::INFINITY, 3).unwrap();
        assert_eq!(next.as_slice(), &[0.0, 2.0]);
        assert_eq!(next.version(), 3);
        assert!(descend(&w, &[1.0], 0.1, 1.0, 3).is_err());
    }
}
