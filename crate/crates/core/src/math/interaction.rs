use serde::{Deserialize, Serialize};

use super::{CompoundWeight, MathError, SparseGradient};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionKind {
    Forward,
    Inverse,
}

/// A `K x K` matrix with one value on the diagonal and another everywhere
/// else, stored as those two scalars.
///
/// The forward matrix is `(1/K) * [a on the diagonal, -b elsewhere]` with
/// `a = K + b(K - 1)`; its inverse has `(b + K) / ((1 + b) K)` on the diagonal
/// and `b / ((1 + b) K)` elsewhere. Off-diagonal values are meaningless for
/// `K = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InteractionMatrix {
    k: usize,
    b: f64,
    kind: InteractionKind,
    diag: f64,
    offdiag: f64,
}

impl InteractionMatrix {
    pub fn build(k: usize, b: f64, kind: InteractionKind) -> Result<Self, MathError> {
        if k == 0 {
            return Err(MathError::ZeroTasks);
        }
        if b.is_nan() || b < 0.0 {
            return Err(MathError::NegativeInteraction(b));
        }
        if !b.is_finite() {
            return Err(MathError::NonFinite("interaction parameter"));
        }
        let kf = k as f64;
        let (diag, offdiag) = match kind {
            InteractionKind::Forward => ((kf + b * (kf - 1.0)) / kf, -b / kf),
            InteractionKind::Inverse => {
                // Diagonal taken as the complement so the row sums to 1
                // without rounding error.
                let off = b / ((1.0 + b) * kf);
                (1.0 - (kf - 1.0) * off, off)
            }
        };
        Ok(Self {
            k,
            b,
            kind,
            diag,
            offdiag,
        })
    }

    pub fn forward(k: usize, b: f64) -> Result<Self, MathError> {
        Self::build(k, b, InteractionKind::Forward)
    }

    pub fn inverse(k: usize, b: f64) -> Result<Self, MathError> {
        Self::build(k, b, InteractionKind::Inverse)
    }

    pub fn tasks(&self) -> usize {
        self.k
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn kind(&self) -> InteractionKind {
        self.kind
    }

    pub fn diag(&self) -> f64 {
        self.diag
    }

    pub fn offdiag(&self) -> f64 {
        self.offdiag
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        if i == j {
            self.diag
        } else {
            self.offdiag
        }
    }

    pub(crate) fn expect_kind(&self, expected: InteractionKind) -> Result<(), MathError> {
        if self.kind == expected {
            Ok(())
        } else {
            Err(MathError::WrongKind { expected })
        }
    }

    fn check_tasks(&self, k: usize) -> Result<(), MathError> {
        if k == self.k {
            Ok(())
        } else {
            Err(MathError::DimensionMismatch {
                expected: self.k,
                found: k,
            })
        }
    }

    /// `(M ⊗ I) g` for a sparse blockwise vector, returned dense.
    ///
    /// Block `j` of the result is `diag * g_j + offdiag * sum_{l != j} g_l`.
    pub fn apply(&self, g: &SparseGradient) -> Result<Vec<f64>, MathError> {
        self.check_tasks(g.tasks())?;
        let d = g.dim();
        let mut out = vec![0.0; self.k * d];

        // Sum of present blocks, seeded with the first block rather than zero
        // so a single-block gradient is carried through without rounding.
        let mut present = g.iter();
        let total = match present.next() {
            None => return Ok(out),
            Some((_, first)) => present.fold(first.to_vec(), |mut acc, (_, blk)| {
                acc.iter_mut().zip(blk).for_each(|(a, x)| *a += x);
                acc
            }),
        };
        let single = g.block_count() == 1;

        for (j, dst) in out.chunks_exact_mut(d.max(1)).enumerate().take(self.k) {
            match g.block(j) {
                Some(gj) if single => {
                    for (o, x) in dst.iter_mut().zip(gj) {
                        *o = self.diag * x;
                    }
                }
                Some(gj) => {
                    for ((o, x), t) in dst.iter_mut().zip(gj).zip(&total) {
                        *o = self.diag * x + self.offdiag * (t - x);
                    }
                }
                None => {
                    for (o, t) in dst.iter_mut().zip(&total) {
                        *o = self.offdiag * t;
                    }
                }
            }
        }
        Ok(out)
    }

    /// `(M ⊗ I) v` for a dense compound vector with block length `d`.
    pub fn apply_dense(&self, v: &[f64], d: usize) -> Result<Vec<f64>, MathError> {
        if v.len() != self.k * d {
            return Err(MathError::DimensionMismatch {
                expected: self.k * d,
                found: v.len(),
            });
        }
        let mut total = vec![0.0; d];
        for blk in v.chunks_exact(d.max(1)) {
            total.iter_mut().zip(blk).for_each(|(t, x)| *t += x);
        }
        let mut out = Vec::with_capacity(v.len());
        for blk in v.chunks_exact(d.max(1)) {
            out.extend(
                blk.iter()
                    .zip(&total)
                    .map(|(x, t)| self.diag * x + self.offdiag * (t - x)),
            );
        }
        Ok(out)
    }

    /// `w^T (M ⊗ I) w = diag * sum_j |w_j|^2 + offdiag * (|sum_j w_j|^2 - sum_j |w_j|^2)`.
    pub fn quadratic_form(&self, w: &CompoundWeight) -> Result<f64, MathError> {
        self.check_tasks(w.tasks())?;
        let own = w.norm_sq();
        let mut total = vec![0.0; w.dim()];
        for blk in w.blocks() {
            total.iter_mut().zip(blk).for_each(|(t, x)| *t += x);
        }
        let cross = total.iter().map(|t| t * t).sum::<f64>() - own;
        Ok(self.diag * own + self.offdiag * cross)
    }
}
