//! Pieces shared by the baseline and serving run loops.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterState;
use crate::error::{Result, ZoError};
use crate::model::{Minibatch, TaskSplits};
use crate::numerics::Digest;
use crate::params::ParamSet;
use crate::scoring::Scorer;
use crate::zo::{
    EvalSample, PhaseTimes, Trajectory, TrajectoryHeader, ZoConfig, TRAJECTORY_SCHEMA,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathKind {
    Baseline,
    Serving,
}

impl PathKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PathKind::Baseline => "baseline",
            PathKind::Serving => "serving",
        }
    }
}

/// Instrumented counters for one run. Weight writes are element writes to
/// base weights or adapter factors; scoring cost is in the scorer's units.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostMeter {
    pub weight_writes: u64,
    /// In-place `±ε` and restore writes (baseline only).
    pub perturb_writes: u64,
    pub update_writes: u64,
    pub fold_writes: u64,
    pub scoring_calls: u64,
    pub scoring_cost_units: u64,
}

impl CostMeter {
    pub(crate) fn add_writes(&mut self, perturb: u64, update: u64, fold: u64) {
        self.perturb_writes += perturb;
        self.update_writes += update;
        self.fold_writes += fold;
        self.weight_writes += perturb + update + fold;
    }
}

/// Everything a run needs besides path-specific options.
#[derive(Clone, Copy)]
pub struct RunSpec<'a> {
    pub scorer: &'a dyn Scorer,
    pub params: &'a ParamSet,
    /// Training data and the evaluation pool; `None` runs on empty batches
    /// and never evaluates.
    pub task: Option<&'a TaskSplits>,
    pub zo: &'a ZoConfig,
    pub steps: u64,
    /// Evaluate every this many steps (and after the last one); 0 disables.
    pub eval_every: u64,
    /// Digest recorded in the trajectory header; defaults to the ZO
    /// config's own digest.
    pub config_digest: Option<Digest>,
}

impl<'a> RunSpec<'a> {
    pub fn new(scorer: &'a dyn Scorer, params: &'a ParamSet, zo: &'a ZoConfig, steps: u64) -> Self {
        Self {
            scorer,
            params,
            task: None,
            zo,
            steps,
            eval_every: 0,
            config_digest: None,
        }
    }

    pub fn with_task(mut self, task: &'a TaskSplits, eval_every: u64) -> Self {
        self.task = Some(task);
        self.eval_every = eval_every;
        self
    }

    pub(crate) fn validate(&self) -> Result<()> {
        self.zo.validate()?;
        if self.steps == 0 {
            return Err(ZoError::config("steps must be at least 1"));
        }
        Ok(())
    }

    pub(crate) fn batch(&self, t: u64) -> Result<Minibatch> {
        match self.task {
            Some(task) => task.minibatch(self.zo.seed, t, self.zo.batch_size),
            None => Ok(Minibatch::empty()),
        }
    }

    pub(crate) fn header(&self, path: PathKind) -> TrajectoryHeader {
        TrajectoryHeader {
            schema: TRAJECTORY_SCHEMA.into(),
            path: path.as_str().into(),
            config_digest: self.config_digest.unwrap_or_else(|| self.zo.digest()),
            model_digest: self.params.digest(),
            task_digest: self.task.map_or(Digest(0), |t| t.digest()),
        }
    }

    pub(crate) fn eval_due(&self, step: u64) -> bool {
        self.task.is_some()
            && self.eval_every > 0
            && (step.is_multiple_of(self.eval_every) || step == self.steps)
    }
}

/// Scores the evaluation pool (the task's dev split).
pub(crate) struct Evaluator {
    pool: Minibatch,
}

impl Evaluator {
    pub(crate) fn new(task: Option<&TaskSplits>) -> Self {
        Self {
            pool: task.map_or_else(Minibatch::empty, |t| t.dev_pool()),
        }
    }

    pub(crate) fn eval(
        &self,
        spec: &RunSpec<'_>,
        params: &ParamSet,
        adapter: Option<&AdapterState>,
        step: u64,
    ) -> Result<EvalSample> {
        let p = spec.zo.precision;
        Ok(EvalSample {
            step,
            loss: spec.scorer.score(params, adapter, &self.pool, p)?,
            accuracy: spec.scorer.eval_accuracy(params, adapter, &self.pool, p)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub path: PathKind,
    pub trajectory: Trajectory,
    /// Cumulative training wall-clock (evaluation excluded) at each
    /// evaluation sample, in milliseconds. Kept out of the trajectory so
    /// trajectory files stay deterministic.
    pub eval_wall_ms: Vec<f64>,
    pub meter: CostMeter,
    pub times: PhaseTimes,
    /// Training wall-clock, evaluation excluded.
    pub train_wall: Duration,
    pub final_params: ParamSet,
}

impl RunOutput {
    pub fn per_step_wall(&self) -> Duration {
        let n = self.trajectory.steps.len().max(1) as u32;
        self.train_wall / n
    }
}

/// Accumulates step wall-clock, excluding evaluation.
pub(crate) struct TrainClock {
    total: Duration,
    started: Option<Instant>,
}

impl TrainClock {
    pub(crate) fn new() -> Self {
        Self {
            total: Duration::ZERO,
            started: None,
        }
    }

    pub(crate) fn start(&mut self) {
        self.started = Some(Instant::now());
    }

    pub(crate) fn stop(&mut self) {
        if let Some(s) = self.started.take() {
            self.total += s.elapsed();
        }
    }

    pub(crate) fn ms(&self) -> f64 {
        self.total.as_secs_f64() * 1e3
    }

    pub(crate) fn total(&self) -> Duration {
        self.total
    }
}
