use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::{fold_packed, AdapterState, LoraSlot, DEFAULT_SLOT_CAP};
use crate::error::{Result, ZoError};
use crate::numerics::{Digest, Hasher, LayerId, StreamKey, StreamRole, WriteCounter};
use crate::params::ParamSet;
use crate::run::{CostMeter, Evaluator, PathKind, RunOutput, RunSpec, TrainClock};
use crate::zo::{lozo_step_timed, Estimator, PhaseTimes, Scope, Trajectory, ZoStepRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServingOptions {
    /// Update slots kept per matrix before they are merged.
    pub slot_cap: usize,
    /// Fold all slots before each evaluation.
    pub fold_on_eval: bool,
    /// Fold at the end of every lazy window. When off, window slots pile up
    /// (merged under `slot_cap`) and are folded only at the end of the run.
    pub fold_at_window_end: bool,
}

impl Default for ServingOptions {
    fn default() -> Self {
        Self {
            slot_cap: DEFAULT_SLOT_CAP,
            fold_on_eval: false,
            fold_at_window_end: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeStatus {
    Queued,
    Scored,
    Applied,
}

/// Stream coordinates of one perturbed parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectionHandle {
    pub layer_id: LayerId,
    pub u: StreamKey,
    pub v: Option<StreamKey>,
}

/// The `+ε` / `−ε` scoring requests of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePair {
    pub step: u64,
    pub directions: Vec<DirectionHandle>,
    pub minibatch_id: Digest,
    pub status: ProbeStatus,
}

/// Folds every update slot into the base weights. Targets sharing a
/// storage matrix (the packed QKV projection) are folded in one pass.
pub fn fold_adapter(
    params: &mut ParamSet,
    adapter: &mut AdapterState,
    writes: &mut WriteCounter,
) -> Result<()> {
    let targets: Vec<_> = params
        .matrix_targets()
        .iter()
        .map(|t| (t.id, t.storage, t.col_offset))
        .collect();
    let mut groups: BTreeMap<usize, Vec<(usize, LoraSlot)>> = BTreeMap::new();
    for (id, storage, off) in targets {
        if adapter.entry(id).is_none() {
            continue;
        }
        if let Some(slot) = adapter.take_update_slots(id)? {
            groups.entry(storage).or_default().push((off, slot));
        }
    }
    for (storage, mut blocks) in groups {
        let mut refs: Vec<(usize, &mut LoraSlot)> =
            blocks.iter_mut().map(|(off, s)| (*off, s)).collect();
        fold_packed(&mut params.matrices[storage], &mut refs, writes)?;
    }
    Ok(())
}

/// Step-at-a-time serving run. Steps are applied strictly in order; a
/// failed step leaves the state exactly as it was after the previous one.
pub struct ServingSession<'a> {
    spec: RunSpec<'a>,
    options: ServingOptions,
    params: ParamSet,
    adapter: AdapterState,
    meter: CostMeter,
    times: PhaseTimes,
    clock: TrainClock,
    trajectory: Trajectory,
    eval_wall_ms: Vec<f64>,
    evaluator: Evaluator,
    probes: Vec<ProbePair>,
    next_step: u64,
}

impl<'a> ServingSession<'a> {
    pub fn new(spec: RunSpec<'a>, options: ServingOptions) -> Result<Self> {
        spec.validate()?;
        if spec.zo.estimator == Estimator::DenseMezo {
            return Err(ZoError::config(
                "the serving path needs a low-rank estimator; run dense-mezo on the baseline path",
            ));
        }
        if options.slot_cap == 0 {
            return Err(ZoError::config("serving.slot_cap must be at least 1"));
        }
        Ok(Self {
            params: spec.params.clone(),
            adapter: AdapterState::for_params(spec.params, options.slot_cap),
            trajectory: Trajectory::new(spec.header(PathKind::Serving)),
            evaluator: Evaluator::new(spec.task),
            spec,
            options,
            meter: CostMeter::default(),
            times: PhaseTimes::default(),
            clock: TrainClock::new(),
            eval_wall_ms: Vec::new(),
            probes: Vec::new(),
            next_step: 0,
        })
    }

    pub fn next_step(&self) -> u64 {
        self.next_step
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn adapter(&self) -> &AdapterState {
        &self.adapter
    }

    pub fn meter(&self) -> &CostMeter {
        &self.meter
    }

    pub fn probes(&self) -> &[ProbePair] {
        &self.probes
    }

    pub fn records(&self) -> &[ZoStepRecord] {
        &self.trajectory.steps
    }

    /// Digest of the persistent state: base weights plus update slots.
    pub fn state_digest(&self) -> Digest {
        let mut h = Hasher::new();
        h.write_u64(self.params.digest().0);
        h.write_u64(self.adapter.update_digest().0);
        h.finish()
    }

    fn probe_pair(&self, t: u64, minibatch_id: Digest) -> ProbePair {
        let zo = self.spec.zo;
        let window_start = zo.window(t) * zo.nu;
        let mut directions: Vec<DirectionHandle> = self
            .params
            .matrix_targets()
            .iter()
            .map(|m| DirectionHandle {
                layer_id: m.id,
                u: StreamKey::new(zo.seed, t, m.id, StreamRole::U),
                v: Some(StreamKey::new(zo.seed, window_start, m.id, StreamRole::V)),
            })
            .collect();
        if zo.scope == Scope::Full {
            directions.extend(
                self.params
                    .vector_targets()
                    .iter()
                    .map(|v| DirectionHandle {
                        layer_id: v.id,
                        u: StreamKey::new(zo.seed, t, v.id, StreamRole::DenseZ),
                        v: None,
                    }),
            );
        }
        ProbePair {
            step: t,
            directions,
            minibatch_id,
            status: ProbeStatus::Queued,
        }
    }

    fn evaluate(&mut self, step: u64) -> Result<()> {
        if self.options.fold_on_eval {
            self.fold()?;
        }
        let sample = self
            .evaluator
            .eval(&self.spec, &self.params, Some(&self.adapter), step)?;
        self.trajectory.evals.push(sample);
        self.eval_wall_ms.push(self.clock.ms());
        Ok(())
    }

    /// Folds all slots now.
    pub fn fold(&mut self) -> Result<()> {
        let start = Instant::now();
        let mut w = WriteCounter::new();
        fold_adapter(&mut self.params, &mut self.adapter, &mut w)?;
        self.meter.add_writes(0, 0, w.writes);
        self.times.fold += start.elapsed();
        Ok(())
    }

    /// Runs the next step, evaluating first when one is due.
    pub fn step(&mut self) -> Result<&ZoStepRecord> {
        let t = self.next_step;
        if t >= self.spec.steps {
            return Err(ZoError::input(format!(
                "run has only {} steps",
                self.spec.steps
            )));
        }
        if self.spec.eval_due(t) && self.trajectory.evals.last().is_none_or(|e| e.step != t) {
            self.evaluate(t)?;
        }
        self.clock.start();
        let result = self.step_inner(t);
        self.clock.stop();
        result?;
        Ok(self.trajectory.steps.last().expect("step just recorded"))
    }

    fn step_inner(&mut self, t: u64) -> Result<()> {
        let batch = self.spec.batch(t)?;
        let mut probe = self.probe_pair(t, batch.id);
        let mut writes = WriteCounter::new();
        let record = lozo_step_timed(
            self.spec.scorer,
            &mut self.params,
            &mut self.adapter,
            self.spec.zo,
            t,
            &batch,
            &mut writes,
            &mut self.times,
        )?;
        probe.status = ProbeStatus::Applied;
        self.meter.add_writes(0, writes.writes, 0);
        self.meter.scoring_calls += 2;
        self.meter.scoring_cost_units += 2 * self.spec.scorer.cost_units(&self.params, &batch);
        self.trajectory.steps.push(record);
        self.probes.push(probe);
        self.next_step = t + 1;
        if self.options.fold_at_window_end && (t + 1).is_multiple_of(self.spec.zo.nu) {
            self.fold()?;
        }
        Ok(())
    }

    /// Runs the remaining steps, folds, and takes the final evaluation.
    pub fn finish(mut self) -> Result<RunOutput> {
        while self.next_step < self.spec.steps {
            self.step()?;
        }
        self.clock.start();
        self.fold()?;
        self.clock.stop();
        if self.spec.eval_due(self.spec.steps) {
            self.evaluate(self.spec.steps)?;
        }
        Ok(RunOutput {
            path: PathKind::Serving,
            trajectory: self.trajectory,
            eval_wall_ms: self.eval_wall_ms,
            meter: self.meter,
            times: self.times,
            train_wall: self.clock.total(),
            final_params: self.params,
        })
    }
}

pub fn run_serving_path(spec: &RunSpec<'_>, options: &ServingOptions) -> Result<RunOutput> {
    ServingSession::new(*spec, *options)?.finish()
}
