//! Two-point zeroth-order estimators and their update rules.

mod direction;
mod estimate;
mod step;
mod trajectory;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ZoError};
use crate::numerics::{Digest, Hasher};
use crate::scoring::Precision;

pub use direction::{
    factorized_direction, lozo_direction, DirectionKind, MatrixDirection, StepDirections,
};
pub use estimate::{estimate_coefficient, Estimate};
pub use step::{dense_mezo_step, lozo_step, materialized_step, PhaseTimes, ZoStepRecord};
pub(crate) use step::{lozo_step_timed, materialized_step_timed};
pub use trajectory::{EvalSample, Trajectory, TrajectoryHeader, TRAJECTORY_SCHEMA};

/// Which parameters a step perturbs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    /// Matrices low-rank, 1-D parameters densely.
    #[default]
    Full,
    /// Matrices only.
    LoraOnly,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// Full Gaussian direction per matrix.
    DenseMezo,
    /// `U Vᵀ` with `V` held for `nu` steps.
    #[default]
    LozoLazy,
    /// `U Vᵀ / √r`; shares the lazy window machinery.
    FactorizedSqrtR,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZoConfig {
    pub epsilon: f64,
    pub learning_rate: f64,
    pub rank: usize,
    pub nu: u64,
    /// Multiply low-rank updates by `1/r`.
    pub divide_by_r: bool,
    pub scope: Scope,
    pub estimator: Estimator,
    pub seed: u64,
    pub batch_size: usize,
    pub precision: Precision,
}

impl Default for ZoConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            learning_rate: 1e-3,
            rank: 2,
            nu: 50,
            divide_by_r: false,
            scope: Scope::Full,
            estimator: Estimator::LozoLazy,
            seed: 42,
            batch_size: 16,
            precision: Precision::Real64,
        }
    }
}

impl ZoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(ZoError::config(format!(
                "zo.epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !self.learning_rate.is_finite() {
            return Err(ZoError::config("zo.learning_rate must be finite"));
        }
        if self.rank == 0 {
            return Err(ZoError::config("zo.rank must be at least 1"));
        }
        if self.nu == 0 {
            return Err(ZoError::config("zo.nu must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(ZoError::config("zo.batch_size must be at least 1"));
        }
        Ok(())
    }

    /// Index of the lazy window containing step `t`.
    pub fn window(&self, t: u64) -> u64 {
        t / self.nu
    }

    pub fn digest(&self) -> Digest {
        let mut h = Hasher::new();
        h.write_bytes(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        );
        h.finish()
    }
}
