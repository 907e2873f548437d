use serde::Serialize;

use super::MathError;

/// The concatenation of `K` task weight vectors, each of length `d`, tagged
/// with the number of updates that produced it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompoundWeight {
    k: usize,
    d: usize,
    data: Vec<f64>,
    version: u64,
}

impl CompoundWeight {
    pub fn zeros(k: usize, d: usize) -> Self {
        Self {
            k,
            d,
            data: vec![0.0; k * d],
            version: 0,
        }
    }

    pub fn from_flat(k: usize, d: usize, data: Vec<f64>, version: u64) -> Result<Self, MathError> {
        if k == 0 {
            return Err(MathError::ZeroTasks);
        }
        if data.len() != k * d {
            return Err(MathError::DimensionMismatch {
                expected: k * d,
                found: data.len(),
            });
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(MathError::NonFinite("compound weight"));
        }
        Ok(Self {
            k,
            d,
            data,
            version,
        })
    }

    pub fn from_blocks(blocks: &[Vec<f64>], version: u64) -> Result<Self, MathError> {
        let d = blocks.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(blocks.len() * d);
        for b in blocks {
            if b.len() != d {
                return Err(MathError::DimensionMismatch {
                    expected: d,
                    found: b.len(),
                });
            }
            data.extend_from_slice(b);
        }
        Self::from_flat(blocks.len(), d, data, version)
    }

    pub fn tasks(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn set_version(&mut self, version: u64) {
        self.version = version;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn block(&self, task: usize) -> &[f64] {
        &self.data[task * self.d..(task + 1) * self.d]
    }

    pub fn blocks(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d.max(1)).take(self.k)
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Checks that `other` has the same block layout.
    pub fn check_shape(&self, k: usize, d: usize) -> Result<(), MathError> {
        if self.k != k {
            return Err(MathError::DimensionMismatch {
                expected: k,
                found: self.k,
            });
        }
        if self.d != d {
            return Err(MathError::DimensionMismatch {
                expected: d,
                found: self.d,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_are_addressable() {
        let w = CompoundWeight::from_blocks(&[vec![1.0, 2.0], vec![3.0, 4.0]], 5).unwrap();
        assert_eq!(w.tasks(), 2);
        assert_eq!(w.dim(), 2);
        assert_eq!(w.block(1), &[3.0, 4.0]);
        assert_eq!(w.version(), 5);
        assert_eq!(w.blocks().count(), 2);
        assert_eq!(w.norm_sq(), 30.0);
    }

    #[test]
    fn rejects_ragged_and_non_finite() {
        assert!(CompoundWeight::from_blocks(&[vec![1.0], vec![1.0, 2.0]], 0).is_err());
        assert!(CompoundWeight::from_flat(1, 2, vec![1.0, f64::INFINITY], 0).is_err());
        assert!(CompoundWeight::from_flat(0, 2, vec![], 0).is_err());
        assert!(CompoundWeight::from_flat(2, 2, vec![0.0; 3], 0).is_err());
    }
}
