use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::DenseMatrix;
use crate::error::{Result, ZoError};

/// Stable identifier of one parameter tensor, used as a stream coordinate.
pub type LayerId = u32;

/// What a stream is used for. Each role is a disjoint counter domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StreamRole {
    U,
    V,
    DenseZ,
    Minibatch,
    /// Model initialization.
    Init,
    /// Synthetic task generation.
    Task,
    /// Synthetic scheduler traces.
    Trace,
}

impl StreamRole {
    fn tag(self) -> u32 {
        match self {
            StreamRole::U => 1,
            StreamRole::V => 2,
            StreamRole::DenseZ => 3,
            StreamRole::Minibatch => 4,
            StreamRole::Init => 5,
            StreamRole::Task => 6,
            StreamRole::Trace => 7,
        }
    }
}

/// Coordinates of one random stream. Equal keys give equal samples no
/// matter when or where they are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub seed: u64,
    pub step: u64,
    pub layer_id: LayerId,
    pub role: StreamRole,
}

const DOMAIN: u64 = 0x7a6f_7374_7265_616d;

impl StreamKey {
    pub fn new(seed: u64, step: u64, layer_id: LayerId, role: StreamRole) -> Self {
        Self {
            seed,
            step,
            layer_id,
            role,
        }
    }

    /// A fresh ChaCha12 generator whose 256-bit key is the packed stream
    /// coordinates; the generator's block counter starts at zero.
    pub fn rng(&self) -> ChaCha12Rng {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.step.to_le_bytes());
        key[16..20].copy_from_slice(&self.layer_id.to_le_bytes());
        key[20..24].copy_from_slice(&self.role.tag().to_le_bytes());
        key[24..32].copy_from_slice(&DOMAIN.to_le_bytes());
        ChaCha12Rng::from_seed(key)
    }
}

/// i.i.d. standard normal `rows × cols` matrix drawn from `key`'s stream.
pub fn sample_gaussian(key: StreamKey, rows: usize, cols: usize) -> Result<DenseMatrix> {
    if rows == 0 || cols == 0 {
        return Err(ZoError::dim(format!(
            "cannot sample a {rows}x{cols} gaussian matrix"
        )));
    }
    let mut rng = key.rng();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    DenseMatrix::from_vec(rows, cols, data)
}

/// `count` distinct indices from `0..population`, in draw order.
pub fn sample_indices(key: StreamKey, population: usize, count: usize) -> Result<Vec<usize>> {
    if count > population {
        return Err(ZoError::input(format!(
            "cannot draw {count} distinct indices from {population}"
        )));
    }
    let mut rng = key.rng();
    let mut pool: Vec<usize> = (0..population).collect();
    for i in 0..count {
        let j = rng.random_range(i..population);
        pool.swap(i, j);
    }
    pool.truncate(count);
    Ok(pool)
}
