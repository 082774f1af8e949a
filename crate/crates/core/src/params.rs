//! Parameter storage shared by every objective the optimizer can drive.
//!
//! A [`ParamSet`] owns dense storage matrices and 1-D vectors. Trainable
//! 2-D surfaces are described by [`MatrixTarget`]s: a target is a column
//! block of one storage matrix, so several targets can live in one packed
//! tensor (Q, K and V inside a fused QKV projection).

use serde::{Deserialize, Serialize};

use crate::error::{Result, ZoError};
use crate::numerics::{DenseMatrix, Digest, Hasher, LayerId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixTarget {
    pub id: LayerId,
    pub name: String,
    /// Index into [`ParamSet::matrices`].
    pub storage: usize,
    pub col_offset: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VectorTarget {
    pub id: LayerId,
    pub name: String,
    /// Index into [`ParamSet::vectors`].
    pub storage: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub matrices: Vec<DenseMatrix>,
    pub vectors: Vec<Vec<f64>>,
    matrix_targets: Vec<MatrixTarget>,
    vector_targets: Vec<VectorTarget>,
}

impl ParamSet {
    pub fn new(
        matrices: Vec<DenseMatrix>,
        vectors: Vec<Vec<f64>>,
        matrix_targets: Vec<MatrixTarget>,
        vector_targets: Vec<VectorTarget>,
    ) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for t in &matrix_targets {
            let m = matrices
                .get(t.storage)
                .ok_or_else(|| ZoError::dim(format!("target {} has no storage", t.name)))?;
            m.check_block(t.col_offset, t.rows, t.cols)?;
            if t.rows == 0 || t.cols == 0 {
                return Err(ZoError::dim(format!("target {} is empty", t.name)));
            }
            if !seen.insert(t.id) {
                return Err(ZoError::config(format!("duplicate layer id {}", t.id)));
            }
        }
        for t in &vector_targets {
            let v = vectors
                .get(t.storage)
                .ok_or_else(|| ZoError::dim(format!("target {} has no storage", t.name)))?;
            if v.len() != t.len {
                return Err(ZoError::dim(format!("target {} length mismatch", t.name)));
            }
            if !seen.insert(t.id) {
                return Err(ZoError::config(format!("duplicate layer id {}", t.id)));
            }
        }
        Ok(Self {
            matrices,
            vectors,
            matrix_targets,
            vector_targets,
        })
    }

    /// A single trainable `rows × cols` matrix and nothing else.
    pub fn single_matrix(id: LayerId, w: DenseMatrix) -> Self {
        let (rows, cols) = w.shape();
        Self::new(
            vec![w],
            Vec::new(),
            vec![MatrixTarget {
                id,
                name: "w".into(),
                storage: 0,
                col_offset: 0,
                rows,
                cols,
            }],
            Vec::new(),
        )
        .expect("single matrix set is well formed")
    }

    pub fn matrix_targets(&self) -> &[MatrixTarget] {
        &self.matrix_targets
    }

    pub fn vector_targets(&self) -> &[VectorTarget] {
        &self.vector_targets
    }

    pub fn matrix_target(&self, id: LayerId) -> Option<&MatrixTarget> {
        self.matrix_targets.iter().find(|t| t.id == id)
    }

    /// Copy of a target's current base block.
    pub fn block(&self, target: &MatrixTarget) -> DenseMatrix {
        self.matrices[target.storage]
            .column_block(target.col_offset, target.cols)
            .expect("targets are validated at construction")
    }

    /// Total number of scalar parameters behind the trainable targets.
    pub fn trainable_len(&self, include_vectors: bool) -> usize {
        let m: usize = self.matrix_targets.iter().map(|t| t.rows * t.cols).sum();
        let v: usize = if include_vectors {
            self.vector_targets.iter().map(|t| t.len).sum()
        } else {
            0
        };
        m + v
    }

    pub fn digest(&self) -> Digest {
        let mut h = Hasher::new();
        for m in &self.matrices {
            h.write_u64(m.rows() as u64);
            h.write_u64(m.cols() as u64);
            h.write_f64s(m.data());
        }
        for v in &self.vectors {
            h.write_u64(v.len() as u64);
            h.write_f64s(v);
        }
        h.finish()
    }

    /// Relative Frobenius distance over all storage, `‖a − b‖ / max(‖a‖, tiny)`.
    pub fn relative_distance(&self, other: &Self) -> Result<f64> {
        if self.matrices.len() != other.matrices.len() || self.vectors.len() != other.vectors.len()
        {
            return Err(ZoError::dim("parameter sets have different layouts"));
        }
        let mut diff = 0.0;
        let mut norm = 0.0;
        for (a, b) in self.matrices.iter().zip(&other.matrices) {
            let d = a.sub(b)?;
            diff += d.data().iter().map(|x| x * x).sum::<f64>();
            norm += a.data().iter().map(|x| x * x).sum::<f64>();
        }
        for (a, b) in self.vectors.iter().zip(&other.vectors) {
            if a.len() != b.len() {
                return Err(ZoError::dim("vector lengths differ"));
            }
            diff += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            norm += a.iter().map(|x| x * x).sum::<f64>();
        }
        Ok(diff.sqrt() / norm.sqrt().max(f64::MIN_POSITIVE))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_targets() {
        let m = DenseMatrix::zeros(2, 6);
        let bad = MatrixTarget {
            id: 1,
            name: "q".into(),
            storage: 0,
            col_offset: 4,
            rows: 2,
            cols: 4,
        };
        assert!(ParamSet::new(vec![m], vec![], vec![bad], vec![]).is_err());
    }

    #[test]
    fn rejects_duplicate_ids() {
        let m = DenseMatrix::zeros(2, 4);
        let t = |off| MatrixTarget {
            id: 7,
            name: "x".into(),
            storage: 0,
            col_offset: off,
            rows: 2,
            cols: 2,
        };
        assert!(ParamSet::new(vec![m], vec![], vec![t(0), t(2)], vec![]).is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = ParamSet::single_matrix(0, DenseMatrix::identity(3));
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.matrices[0].set(0, 1, 1e-9);
        assert_ne!(a.digest(), b.digest());
        assert!(a.relative_distance(&b).unwrap() > 0.0);
    }
}
