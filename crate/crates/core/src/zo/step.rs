use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::direction::{update_factor, DirectionKind, StepDirections};
use super::estimate::{estimate_coefficient, Estimate};
use super::{Estimator, ZoConfig};
use crate::adapter::AdapterState;
use crate::error::{Result, ZoError};
use crate::model::Minibatch;
use crate::numerics::{DenseMatrix, Digest, WriteCounter};
use crate::params::ParamSet;
use crate::scoring::Scorer;

/// Audit record of one step. Shared by both execution paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoStepRecord {
    pub step: u64,
    pub loss_plus: f64,
    pub loss_minus: f64,
    pub coefficient: f64,
    /// Slot-weight form of the update, `−η·c`.
    pub beta: f64,
    pub seed: u64,
    pub u_digest: Digest,
    pub v_digest: Digest,
    pub minibatch_id: Digest,
}

impl ZoStepRecord {
    fn new(config: &ZoConfig, dirs: &StepDirections, batch: &Minibatch, est: Estimate) -> Self {
        Self {
            step: dirs.step,
            loss_plus: est.loss_plus,
            loss_minus: est.loss_minus,
            coefficient: est.coefficient,
            beta: -config.learning_rate * est.coefficient,
            seed: config.seed,
            u_digest: dirs.u_digest(),
            v_digest: dirs.v_digest(),
            minibatch_id: batch.id,
        }
    }

    /// Recomputes `c` from the recorded losses.
    pub fn coefficient_is_exact(&self, epsilon: f64) -> bool {
        let c = (self.loss_plus - self.loss_minus) / (2.0 * epsilon);
        c.to_bits() == self.coefficient.to_bits()
    }
}

/// Wall-clock spent in each phase of a step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimes {
    pub scoring: Duration,
    /// Materialized `±ε` and restore writes.
    pub perturb: Duration,
    pub update: Duration,
    pub fold: Duration,
}

/// Adapter-path step: perturbations are scored as composed views, the
/// update lands on the window accumulators (`A ← A − η·c·G`) and, under
/// Full scope, in place on the 1-D parameters.
///
/// On a scoring failure nothing is updated and the perturbation is
/// cleared.
pub fn lozo_step<S: Scorer + ?Sized>(
    scorer: &S,
    params: &mut ParamSet,
    adapter: &mut AdapterState,
    config: &ZoConfig,
    t: u64,
    batch: &Minibatch,
    writes: &mut WriteCounter,
) -> Result<ZoStepRecord> {
    lozo_step_timed(
        scorer,
        params,
        adapter,
        config,
        t,
        batch,
        writes,
        &mut PhaseTimes::default(),
    )
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn lozo_step_timed<S: Scorer + ?Sized>(
    scorer: &S,
    params: &mut ParamSet,
    adapter: &mut AdapterState,
    config: &ZoConfig,
    t: u64,
    batch: &Minibatch,
    writes: &mut WriteCounter,
    times: &mut PhaseTimes,
) -> Result<ZoStepRecord> {
    if config.estimator == Estimator::DenseMezo {
        return Err(ZoError::config(
            "dense directions have no low-rank slot form; use the materialized path",
        ));
    }
    let dirs = StepDirections::sample(config, params, t)?;
    adapter.clear_perturbations();
    for d in &dirs.matrices {
        if let DirectionKind::LowRank(slot) = &d.kind {
            adapter.install_perturbation(d.target.id, slot.clone(), config.epsilon)?;
        }
    }
    for (target, z) in &dirs.vectors {
        adapter.install_vector_perturbation(target.id, z.clone(), config.epsilon);
    }

    let start = Instant::now();
    let est = estimate_coefficient(
        scorer,
        params,
        adapter,
        config.epsilon,
        batch,
        config.precision,
    );
    times.scoring += start.elapsed();
    adapter.clear_perturbations();
    let est = est?;

    let start = Instant::now();
    let eta = config.learning_rate;
    let c = est.coefficient;
    let f = update_factor(config);
    let window = config.window(t);
    for d in &dirs.matrices {
        if let DirectionKind::LowRank(slot) = &d.kind {
            let g = slot.a.scaled(slot.scale * f);
            adapter.accumulate_window(d.target.id, window, &slot.b, eta, c, &g, writes)?;
        }
    }
    for (target, z) in &dirs.vectors {
        let p = &mut params.vectors[target.storage];
        for (x, dz) in p.iter_mut().zip(z) {
            *x += (-eta * c) * dz;
        }
        writes.record(z.len());
    }
    times.update += start.elapsed();
    Ok(ZoStepRecord::new(config, &dirs, batch, est))
}

/// Conventional in-place step: `W += ε·z`, score, `W −= 2ε·z`, score,
/// `W += ε·z`, then `W −= η·c·z`, for every perturbed parameter. Every
/// write goes through the counter.
///
/// With `recompute_products` the low-rank product is rebuilt for each of
/// the four writes instead of being cached for the step.
#[allow(clippy::too_many_arguments)]
pub fn materialized_step<S: Scorer + ?Sized>(
    scorer: &S,
    params: &mut ParamSet,
    config: &ZoConfig,
    recompute_products: bool,
    t: u64,
    batch: &Minibatch,
    writes: &mut WriteCounter,
) -> Result<ZoStepRecord> {
    let mut perturb = WriteCounter::new();
    let mut update = WriteCounter::new();
    let r = materialized_step_timed(
        scorer,
        params,
        config,
        recompute_products,
        t,
        batch,
        &mut perturb,
        &mut update,
        &mut PhaseTimes::default(),
    );
    writes.record((perturb.writes + update.writes) as usize);
    r
}

/// [`materialized_step`] restricted to dense Gaussian directions.
pub fn dense_mezo_step<S: Scorer + ?Sized>(
    scorer: &S,
    params: &mut ParamSet,
    config: &ZoConfig,
    t: u64,
    batch: &Minibatch,
    writes: &mut WriteCounter,
) -> Result<ZoStepRecord> {
    if config.estimator != Estimator::DenseMezo {
        return Err(ZoError::config(
            "dense_mezo_step needs the dense-mezo estimator",
        ));
    }
    materialized_step(scorer, params, config, false, t, batch, writes)
}

struct Materializer<'a> {
    dirs: &'a StepDirections,
    products: Option<Vec<DenseMatrix>>,
}

impl Materializer<'_> {
    /// `θ ← θ + alpha_m · z` on matrices and `θ ← θ + alpha_v · z` on
    /// vectors.
    fn apply(
        &self,
        params: &mut ParamSet,
        alpha_m: f64,
        alpha_v: f64,
        writes: &mut WriteCounter,
    ) -> Result<()> {
        for (i, d) in self.dirs.matrices.iter().enumerate() {
            let w = &mut params.matrices[d.target.storage];
            let off = d.target.col_offset;
            match (&d.kind, &self.products) {
                (DirectionKind::Dense(z), _) => w.add_scaled_block(off, alpha_m, z, writes)?,
                (DirectionKind::LowRank(s), Some(p)) => {
                    w.add_scaled_block(off, alpha_m * s.scale, &p[i], writes)?
                }
                (DirectionKind::LowRank(s), None) => {
                    w.axpy_outer_block(off, alpha_m * s.scale, &s.a, &s.b, writes)?
                }
            }
        }
        for (target, z) in &self.dirs.vectors {
            let p = &mut params.vectors[target.storage];
            for (x, dz) in p.iter_mut().zip(z) {
                *x += alpha_v * dz;
            }
            writes.record(z.len());
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn materialized_step_timed<S: Scorer + ?Sized>(
    scorer: &S,
    params: &mut ParamSet,
    config: &ZoConfig,
    recompute_products: bool,
    t: u64,
    batch: &Minibatch,
    perturb_writes: &mut WriteCounter,
    update_writes: &mut WriteCounter,
    times: &mut PhaseTimes,
) -> Result<ZoStepRecord> {
    let dirs = StepDirections::sample(config, params, t)?;
    let writes = perturb_writes;
    let start = Instant::now();
    let products = if recompute_products {
        None
    } else {
        let mut ps = Vec::with_capacity(dirs.matrices.len());
        for d in &dirs.matrices {
            ps.push(match &d.kind {
                DirectionKind::LowRank(s) => DenseMatrix::outer_product(&s.a, &s.b)?,
                // Dense directions are applied directly.
                DirectionKind::Dense(_) => DenseMatrix::zeros(0, 0),
            });
        }
        Some(ps)
    };
    let m = Materializer {
        dirs: &dirs,
        products,
    };
    let eps = config.epsilon;
    let score = |params: &ParamSet, times: &mut PhaseTimes| {
        let start = Instant::now();
        let r = scorer.score(params, None, batch, config.precision);
        times.scoring += start.elapsed();
        r
    };

    m.apply(params, eps, eps, writes)?;
    times.perturb += start.elapsed();
    let loss_plus = match score(params, times) {
        Ok(l) => l,
        Err(e) => {
            m.apply(params, -eps, -eps, writes)?;
            return Err(e);
        }
    };
    let start = Instant::now();
    m.apply(params, -2.0 * eps, -2.0 * eps, writes)?;
    times.perturb += start.elapsed();
    let loss_minus = match score(params, times) {
        Ok(l) => l,
        Err(e) => {
            m.apply(params, eps, eps, writes)?;
            return Err(e);
        }
    };
    let start = Instant::now();
    m.apply(params, eps, eps, writes)?;
    times.perturb += start.elapsed();
    let start = Instant::now();
    let est = Estimate::from_losses(loss_plus, loss_minus, eps);
    let beta = -config.learning_rate * est.coefficient;
    m.apply(params, beta * update_factor(config), beta, update_writes)?;
    times.update += start.elapsed();
    Ok(ZoStepRecord::new(config, &dirs, batch, est))
}
