//! The conventional training loop: every step perturbs, restores and
//! updates the dense weights in place. It is both the correctness oracle
//! for the serving path and the write-traffic comparand.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::WriteCounter;
use crate::run::{CostMeter, Evaluator, PathKind, RunOutput, RunSpec, TrainClock};
use crate::zo::{materialized_step_timed, EvalSample, PhaseTimes, Trajectory, ZoConfig};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineOptions {
    /// Rebuild `U Vᵀ` for each of the four writes instead of caching it
    /// for the step.
    pub recompute_products: bool,
}

#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub config: ZoConfig,
    pub output: RunOutput,
}

impl BaselineRun {
    pub fn weight_write_count(&self) -> u64 {
        self.output.meter.weight_writes
    }

    pub fn eval_curve(&self) -> &[EvalSample] {
        &self.output.trajectory.evals
    }
}

pub fn run_baseline(spec: &RunSpec<'_>, options: &BaselineOptions) -> Result<BaselineRun> {
    spec.validate()?;
    let mut params = spec.params.clone();
    let mut trajectory = Trajectory::new(spec.header(PathKind::Baseline));
    let evaluator = Evaluator::new(spec.task);
    let mut meter = CostMeter::default();
    let mut times = PhaseTimes::default();
    let mut clock = TrainClock::new();
    let mut eval_wall_ms = Vec::new();

    for t in 0..spec.steps {
        if spec.eval_due(t) {
            trajectory
                .evals
                .push(evaluator.eval(spec, &params, None, t)?);
            eval_wall_ms.push(clock.ms());
        }
        clock.start();
        let batch = spec.batch(t)?;
        let mut perturb = WriteCounter::new();
        let mut update = WriteCounter::new();
        let record = materialized_step_timed(
            spec.scorer,
            &mut params,
            spec.zo,
            options.recompute_products,
            t,
            &batch,
            &mut perturb,
            &mut update,
            &mut times,
        );
        meter.add_writes(perturb.writes, update.writes, 0);
        let record = record?;
        meter.scoring_calls += 2;
        meter.scoring_cost_units += 2 * spec.scorer.cost_units(&params, &batch);
        clock.stop();
        trajectory.steps.push(record);
    }
    if spec.eval_due(spec.steps) {
        trajectory
            .evals
            .push(evaluator.eval(spec, &params, None, spec.steps)?);
        eval_wall_ms.push(clock.ms());
    }
    Ok(BaselineRun {
        config: spec.zo.clone(),
        output: RunOutput {
            path: PathKind::Baseline,
            trajectory,
            eval_wall_ms,
            meter,
            times,
            train_wall: clock.total(),
            final_params: params,
        },
    })
}

/// The run's trajectory as JSON lines, in the same format as the serving
/// path's.
pub fn compare_ready_export(run: &BaselineRun) -> String {
    run.output.trajectory.to_jsonl()
}
