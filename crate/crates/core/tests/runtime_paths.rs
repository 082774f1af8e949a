use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use zoserve_core::adapter::{fold_packed, AdapterState, LoraSlot};
use zoserve_core::baseline::{run_baseline, BaselineOptions};
use zoserve_core::model::{
    generate_task, Minibatch, ModelConfig, ModelParams, TaskConfig, TaskSplits,
};
use zoserve_core::numerics::{sample_gaussian, DenseMatrix, StreamKey, StreamRole, WriteCounter};
use zoserve_core::params::ParamSet;
use zoserve_core::run::RunSpec;
use zoserve_core::runtime::{
    fold_adapter, run_serving_path, ProbeStatus, ServingOptions, ServingSession,
};
use zoserve_core::scoring::{ConstantScorer, FnScorer, Precision, Scorer};
use zoserve_core::zo::{Estimator, Scope, ZoConfig};
use zoserve_core::{Result, ZoError};

fn gaussian(seed: u64, m: usize, n: usize) -> DenseMatrix {
    sample_gaussian(StreamKey::new(seed, 0, 1, StreamRole::Init), m, n).unwrap()
}

fn tiny() -> (ModelParams, TaskSplits) {
    let model = ModelParams::init(&ModelConfig::tiny()).unwrap();
    let task = generate_task(
        &TaskConfig {
            max_prompt_len: 8,
            ..TaskConfig::default()
        },
        model.config.vocab,
    )
    .unwrap();
    (model, task)
}

#[test]
fn single_step_window_write_counts() {
    let params = ParamSet::single_matrix(1, gaussian(1, 4, 4));
    let scorer = ConstantScorer { loss: 0.0 };
    let zo = ZoConfig {
        rank: 1,
        nu: 1,
        ..ZoConfig::default()
    };
    let spec = RunSpec::new(&scorer, &params, &zo, 1);
    let s = run_serving_path(&spec, &ServingOptions::default()).unwrap();
    let b = run_baseline(&spec, &BaselineOptions::default()).unwrap();
    assert_eq!(s.meter.weight_writes, 4 + 16);
    assert_eq!(b.weight_write_count(), 64);
    assert_eq!(b.output.meter.perturb_writes, 48);
    assert_eq!(b.output.meter.update_writes, 16);
    assert_eq!(s.meter.scoring_calls, 2);
}

#[test]
fn write_counts_scale_with_windows() {
    let (m, n, r) = (8u64, 5u64, 2usize);
    let params = ParamSet::single_matrix(1, gaussian(2, 8, 5));
    let scorer = ConstantScorer { loss: 0.0 };
    for (nu, steps) in [(1u64, 7u64), (3, 9), (3, 10), (10, 10)] {
        let zo = ZoConfig {
            rank: r,
            nu,
            ..ZoConfig::default()
        };
        let spec = RunSpec::new(&scorer, &params, &zo, steps);
        let s = run_serving_path(&spec, &ServingOptions::default()).unwrap();
        let windows = steps.div_ceil(nu);
        assert_eq!(s.meter.update_writes, steps * m * r as u64, "nu {nu}");
        assert_eq!(s.meter.fold_writes, windows * m * n, "nu {nu}");
        let b = run_baseline(&spec, &BaselineOptions::default()).unwrap();
        assert_eq!(b.weight_write_count(), 4 * m * n * steps);
    }
}

#[test]
fn packed_fold_matches_blockwise_fold() {
    let mut packed = gaussian(3, 4, 12);
    let mut blockwise = packed.clone();
    let slots: Vec<LoraSlot> = (0..3)
        .map(|i| LoraSlot::new(gaussian(10 + i, 4, 2), gaussian(20 + i, 4, 2), 0.5).unwrap())
        .collect();
    let mut w = WriteCounter::new();
    let mut owned = slots.clone();
    let mut refs: Vec<(usize, &mut LoraSlot)> = owned
        .iter_mut()
        .enumerate()
        .map(|(i, s)| (4 * i, s))
        .collect();
    fold_packed(&mut packed, &mut refs, &mut w).unwrap();
    assert_eq!(w.writes, 4 * 12);
    assert!(owned.iter().all(|s| s.dense().max_abs() == 0.0));
    for (i, s) in slots.iter().enumerate() {
        let d = s.dense();
        for r in 0..4 {
            for c in 0..4 {
                let x = blockwise.get(r, 4 * i + c) + d.get(r, c);
                blockwise.set(r, 4 * i + c, x);
            }
        }
    }
    assert!(packed.max_abs_diff(&blockwise).unwrap() < 1e-15);
}

#[test]
fn model_fold_touches_each_storage_once() {
    let (model, task) = tiny();
    let scorer = model.scorer();
    let zo = ZoConfig {
        nu: 4,
        ..ZoConfig::default()
    };
    let spec = RunSpec::new(&scorer, &model.params, &zo, 4).with_task(&task, 0);
    let mut session = ServingSession::new(
        spec,
        ServingOptions {
            fold_at_window_end: false,
            ..ServingOptions::default()
        },
    )
    .unwrap();
    for _ in 0..4 {
        session.step().unwrap();
    }
    let mut params = session.params().clone();
    let mut adapter = session.adapter().clone();
    let mut w = WriteCounter::new();
    fold_adapter(&mut params, &mut adapter, &mut w).unwrap();
    let mut storages: Vec<usize> = params.matrix_targets().iter().map(|t| t.storage).collect();
    storages.sort_unstable();
    storages.dedup();
    let expected: usize = storages
        .iter()
        .map(|&s| params.matrices[s].rows() * params.matrices[s].cols())
        .sum();
    assert_eq!(w.writes, expected as u64);
    assert!(adapter.entries().all(|(_, e)| e.update_slots.is_empty()));
}

/// Fails the `fail_at`-th scoring call once, otherwise delegates.
struct FlakyScorer<S> {
    inner: S,
    calls: AtomicUsize,
    fail_at: usize,
    tripped: AtomicBool,
}

impl<S: Scorer> Scorer for FlakyScorer<S> {
    fn score(
        &self,
        params: &ParamSet,
        adapter: Option<&AdapterState>,
        batch: &Minibatch,
        precision: Precision,
    ) -> Result<f64> {
        let k = self.calls.fetch_add(1, Ordering::SeqCst);
        if k == self.fail_at && !self.tripped.swap(true, Ordering::SeqCst) {
            return Err(ZoError::Scoring("injected failure".into()));
        }
        self.inner.score(params, adapter, batch, precision)
    }
}

#[test]
fn failed_step_leaves_state_untouched() {
    let (model, task) = tiny();
    let zo = ZoConfig {
        nu: 3,
        ..ZoConfig::default()
    };
    let flaky = FlakyScorer {
        inner: model.scorer(),
        calls: AtomicUsize::new(0),
        // Second probe of step 5.
        fail_at: 11,
        tripped: AtomicBool::new(false),
    };
    let spec = RunSpec::new(&flaky, &model.params, &zo, 8).with_task(&task, 0);
    let mut session = ServingSession::new(spec, ServingOptions::default()).unwrap();
    for _ in 0..5 {
        session.step().unwrap();
    }
    let before = session.state_digest();
    let adapter_before = session.adapter().clone();
    assert!(session.step().is_err());
    assert_eq!(session.state_digest(), before);
    assert_eq!(session.next_step(), 5);
    assert_eq!(session.records().len(), 5);
    assert!(!session.adapter().has_active_perturbation());
    assert_eq!(
        session.adapter().update_digest(),
        adapter_before.update_digest()
    );

    // Retrying resumes as if nothing happened.
    let resumed = session.finish().unwrap();
    let plain_scorer = model.scorer();
    let clean = RunSpec::new(&plain_scorer, &model.params, &zo, 8).with_task(&task, 0);
    let reference = run_serving_path(&clean, &ServingOptions::default()).unwrap();
    assert_eq!(resumed.trajectory.steps, reference.trajectory.steps);
    assert_eq!(
        resumed.final_params.digest(),
        reference.final_params.digest()
    );
}

#[test]
fn paths_agree_across_options() {
    let (model, task) = tiny();
    let scorer = model.scorer();
    let cases = [
        (
            Scope::Full,
            Estimator::LozoLazy,
            3u64,
            false,
            ServingOptions::default(),
        ),
        (
            Scope::LoraOnly,
            Estimator::LozoLazy,
            1,
            true,
            ServingOptions::default(),
        ),
        (
            Scope::Full,
            Estimator::FactorizedSqrtR,
            2,
            false,
            ServingOptions::default(),
        ),
        (
            Scope::Full,
            Estimator::LozoLazy,
            2,
            false,
            ServingOptions {
                slot_cap: 1,
                fold_on_eval: true,
                fold_at_window_end: false,
            },
        ),
    ];
    for (scope, estimator, nu, divide_by_r, options) in cases {
        let zo = ZoConfig {
            scope,
            estimator,
            nu,
            divide_by_r,
            rank: 2,
            learning_rate: 0.01,
            ..ZoConfig::default()
        };
        let spec = RunSpec::new(&scorer, &model.params, &zo, 9).with_task(&task, 4);
        let s = run_serving_path(&spec, &options).unwrap();
        let b = run_baseline(&spec, &BaselineOptions::default())
            .unwrap()
            .output;
        let dist = s.final_params.relative_distance(&b.final_params).unwrap();
        assert!(dist < 1e-12, "{scope:?} {estimator:?} nu {nu}: {dist}");
        for (x, y) in s.trajectory.steps.iter().zip(&b.trajectory.steps) {
            assert_eq!(
                (x.seed, x.u_digest, x.v_digest),
                (y.seed, y.u_digest, y.v_digest)
            );
            assert!((x.loss_plus - y.loss_plus).abs() < 1e-12);
        }
        let es: Vec<u64> = s.trajectory.evals.iter().map(|e| e.step).collect();
        assert_eq!(es, vec![0, 4, 8, 9]);
        assert_eq!(
            es,
            b.trajectory
                .evals
                .iter()
                .map(|e| e.step)
                .collect::<Vec<_>>()
        );
    }
}

#[test]
fn recompute_products_changes_nothing_numerically() {
    let (model, task) = tiny();
    let scorer = model.scorer();
    let zo = ZoConfig::default();
    let spec = RunSpec::new(&scorer, &model.params, &zo, 5).with_task(&task, 0);
    let cached = run_baseline(&spec, &BaselineOptions::default()).unwrap();
    let recomputed = run_baseline(
        &spec,
        &BaselineOptions {
            recompute_products: true,
        },
    )
    .unwrap();
    assert_eq!(
        cached.output.final_params.digest(),
        recomputed.output.final_params.digest()
    );
    assert_eq!(cached.weight_write_count(), recomputed.weight_write_count());
}

#[test]
fn probe_pairs_carry_stream_handles() {
    let (model, task) = tiny();
    let scorer = model.scorer();
    let zo = ZoConfig {
        nu: 3,
        ..ZoConfig::default()
    };
    let spec = RunSpec::new(&scorer, &model.params, &zo, 5).with_task(&task, 0);
    let mut session = ServingSession::new(spec, ServingOptions::default()).unwrap();
    for _ in 0..5 {
        session.step().unwrap();
    }
    let probes = session.probes();
    assert_eq!(probes.len(), 5);
    for p in probes {
        assert_eq!(p.status, ProbeStatus::Applied);
        let matrices: Vec<_> = p.directions.iter().filter(|d| d.v.is_some()).collect();
        assert_eq!(matrices.len(), model.params.matrix_targets().len());
        for d in matrices {
            assert_eq!(
                d.u,
                StreamKey::new(zo.seed, p.step, d.layer_id, StreamRole::U)
            );
            assert_eq!(
                d.v,
                Some(StreamKey::new(
                    zo.seed,
                    (p.step / 3) * 3,
                    d.layer_id,
                    StreamRole::V
                ))
            );
        }
    }
}

#[test]
fn serving_rejects_dense_and_bad_options() {
    let params = ParamSet::single_matrix(1, gaussian(1, 3, 3));
    let scorer = FnScorer::new(|_: &ParamSet| 0.0);
    let dense = ZoConfig {
        estimator: Estimator::DenseMezo,
        ..ZoConfig::default()
    };
    let spec = RunSpec::new(&scorer, &params, &dense, 2);
    assert!(matches!(
        run_serving_path(&spec, &ServingOptions::default()),
        Err(ZoError::Config(_))
    ));
    let zo = ZoConfig::default();
    let spec = RunSpec::new(&scorer, &params, &zo, 2);
    let bad = ServingOptions {
        slot_cap: 0,
        ..ServingOptions::default()
    };
    assert!(run_serving_path(&spec, &bad).is_err());
    let zero = RunSpec::new(&scorer, &params, &zo, 0);
    assert!(run_serving_path(&zero, &ServingOptions::default()).is_err());
}
