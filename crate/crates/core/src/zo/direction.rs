use super::{Estimator, Scope, ZoConfig};
use crate::adapter::LoraSlot;
use crate::error::{Result, ZoError};
use crate::numerics::{
    sample_gaussian, DenseMatrix, Digest, Hasher, LayerId, StreamKey, StreamRole,
};
use crate::params::{MatrixTarget, ParamSet, VectorTarget};

/// Lazy low-rank factors for step `t`: `V` comes from the stream of the
/// window's first step `k·ν` and `U` from the stream of `t` itself.
pub fn lozo_direction(
    seed: u64,
    layer: LayerId,
    rows: usize,
    cols: usize,
    t: u64,
    nu: u64,
    rank: usize,
) -> Result<(DenseMatrix, DenseMatrix)> {
    if rank == 0 || rank > rows.min(cols) {
        return Err(ZoError::config(format!(
            "rank {rank} out of range for a {rows}x{cols} matrix"
        )));
    }
    lazy_factors(seed, layer, rows, cols, t, nu, rank)
}

/// `U Vᵀ / √r` as a slot. `r` may exceed the matrix dimensions.
pub fn factorized_direction(
    seed: u64,
    layer: LayerId,
    rows: usize,
    cols: usize,
    t: u64,
    nu: u64,
    rank: usize,
) -> Result<LoraSlot> {
    if rank == 0 {
        return Err(ZoError::config("rank must be at least 1"));
    }
    let (u, v) = lazy_factors(seed, layer, rows, cols, t, nu, rank)?;
    LoraSlot::new(u, v, 1.0 / (rank as f64).sqrt())
}

fn lazy_factors(
    seed: u64,
    layer: LayerId,
    rows: usize,
    cols: usize,
    t: u64,
    nu: u64,
    rank: usize,
) -> Result<(DenseMatrix, DenseMatrix)> {
    if nu == 0 {
        return Err(ZoError::config("nu must be at least 1"));
    }
    let window_start = (t / nu) * nu;
    let v = sample_gaussian(
        StreamKey::new(seed, window_start, layer, StreamRole::V),
        cols,
        rank,
    )?;
    let u = sample_gaussian(StreamKey::new(seed, t, layer, StreamRole::U), rows, rank)?;
    Ok((u, v))
}

#[derive(Debug, Clone, PartialEq)]
pub enum DirectionKind {
    LowRank(LoraSlot),
    Dense(DenseMatrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixDirection {
    pub target: MatrixTarget,
    pub kind: DirectionKind,
}

impl MatrixDirection {
    /// Dense `z` for this target, with the slot scale applied.
    pub fn dense(&self) -> DenseMatrix {
        match &self.kind {
            DirectionKind::LowRank(s) => s.dense(),
            DirectionKind::Dense(z) => z.clone(),
        }
    }
}

/// Every direction one step perturbs along.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDirections {
    pub step: u64,
    pub matrices: Vec<MatrixDirection>,
    pub vectors: Vec<(VectorTarget, Vec<f64>)>,
}

impl StepDirections {
    pub fn sample(config: &ZoConfig, params: &ParamSet, t: u64) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let mut matrices = Vec::with_capacity(params.matrix_targets().len());
        for target in params.matrix_targets() {
            let (m, n) = (target.rows, target.cols);
            let kind = match config.estimator {
                Estimator::DenseMezo => DirectionKind::Dense(sample_gaussian(
                    StreamKey::new(seed, t, target.id, StreamRole::DenseZ),
                    m,
                    n,
                )?),
                Estimator::LozoLazy => {
                    let (u, v) = lozo_direction(seed, target.id, m, n, t, config.nu, config.rank)?;
                    DirectionKind::LowRank(LoraSlot::new(u, v, 1.0)?)
                }
                Estimator::FactorizedSqrtR => DirectionKind::LowRank(factorized_direction(
                    seed,
                    target.id,
                    m,
                    n,
                    t,
                    config.nu,
                    config.rank,
                )?),
            };
            matrices.push(MatrixDirection {
                target: target.clone(),
                kind,
            });
        }
        let mut vectors = Vec::new();
        if config.scope == Scope::Full {
            for target in params.vector_targets() {
                let z = sample_gaussian(
                    StreamKey::new(seed, t, target.id, StreamRole::DenseZ),
                    1,
                    target.len,
                )?
                .into_vec();
                vectors.push((target.clone(), z));
            }
        }
        Ok(Self {
            step: t,
            matrices,
            vectors,
        })
    }

    /// Digest of the left factors (or dense `z`) in target order, followed
    /// by the 1-D directions.
    pub fn u_digest(&self) -> Digest {
        let mut h = Hasher::new();
        for d in &self.matrices {
            match &d.kind {
                DirectionKind::LowRank(s) => h.write_f64s(s.a.data()),
                DirectionKind::Dense(z) => h.write_f64s(z.data()),
            }
        }
        for (_, z) in &self.vectors {
            h.write_f64s(z);
        }
        h.finish()
    }

    /// Digest of the right factors in target order; dense directions
    /// contribute nothing.
    pub fn v_digest(&self) -> Digest {
        let mut h = Hasher::new();
        for d in &self.matrices {
            if let DirectionKind::LowRank(s) = &d.kind {
                h.write_f64s(s.b.data());
            }
        }
        h.finish()
    }
}

/// Extra factor on low-rank updates (`1/r` when `divide_by_r` is set).
pub(crate) fn update_factor(config: &ZoConfig) -> f64 {
    if config.divide_by_r && config.estimator != Estimator::DenseMezo {
        1.0 / config.rank as f64
    } else {
        1.0
    }
}
