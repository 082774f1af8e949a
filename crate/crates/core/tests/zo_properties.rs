use proptest::prelude::*;
use zoserve_core::adapter::AdapterState;
use zoserve_core::model::Minibatch;
use zoserve_core::numerics::{sample_gaussian, DenseMatrix, StreamKey, StreamRole, WriteCounter};
use zoserve_core::params::ParamSet;
use zoserve_core::scoring::FnScorer;
use zoserve_core::verify::rank_check;
use zoserve_core::zo::{
    factorized_direction, lozo_direction, lozo_step, Estimate, Estimator, StepDirections, ZoConfig,
};

fn moments(xs: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let kurt = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n / (var * var);
    (mean, var, kurt)
}

/// Entries of `Σₖ uₖvₖ/√r` with independent standard normals have fourth
/// moment `3 + 6/r`.
fn kurtosis_oracle(r: usize) -> f64 {
    3.0 + 6.0 / r as f64
}

#[test]
fn factorized_entries_match_moment_oracle() {
    for (rank, tol) in [(1usize, 0.6), (4, 0.25), (128, 0.1)] {
        let mut xs = Vec::with_capacity(100_000);
        for layer in 0..1000u32 {
            let slot = factorized_direction(7, layer, 10, 10, 3, 1, rank).unwrap();
            xs.extend_from_slice(slot.dense().data());
        }
        let (mean, var, kurt) = moments(&xs);
        assert!(mean.abs() <= 0.01, "r={rank} mean {mean}");
        assert!((var - 1.0).abs() <= 0.03, "r={rank} variance {var}");
        assert!(
            (kurt - kurtosis_oracle(rank)).abs() <= tol,
            "r={rank} kurtosis {kurt} vs {}",
            kurtosis_oracle(rank)
        );
    }
}

#[test]
fn lozo_v_is_shared_within_a_window_only() {
    let cfg = ZoConfig {
        nu: 4,
        ..ZoConfig::default()
    };
    let p = ParamSet::single_matrix(1, DenseMatrix::zeros(6, 5));
    let d: Vec<StepDirections> = (0..8)
        .map(|t| StepDirections::sample(&cfg, &p, t).unwrap())
        .collect();
    for t in 1..8 {
        let same_window = t % 4 != 0;
        assert_eq!(
            d[t].v_digest() == d[t - 1].v_digest(),
            same_window,
            "step {t}"
        );
        assert_ne!(d[t].u_digest(), d[t - 1].u_digest());
    }
}

#[test]
fn dense_directions_ignore_window() {
    let cfg = ZoConfig {
        estimator: Estimator::DenseMezo,
        ..ZoConfig::default()
    };
    let p = ParamSet::single_matrix(1, DenseMatrix::zeros(3, 3));
    let a = StepDirections::sample(&cfg, &p, 0).unwrap();
    let b = StepDirections::sample(&cfg, &p, 1).unwrap();
    assert_ne!(a.u_digest(), b.u_digest());
    assert_eq!(a.v_digest(), b.v_digest());
}

fn quadratic_target(m: usize, n: usize) -> DenseMatrix {
    sample_gaussian(StreamKey::new(99, 0, 1, StreamRole::Init), m, n).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn window_update_has_rank_at_most_r(
        m in 2usize..8,
        n in 2usize..8,
        r_raw in 1usize..8,
        nu in 1u64..6,
        seed in 0u64..1000,
    ) {
        let rank = r_raw.min(m).min(n);
        let cfg = ZoConfig { rank, nu, seed, learning_rate: 0.05, ..ZoConfig::default() };
        let target = quadratic_target(m, n);
        let scorer = FnScorer::new(move |p: &ParamSet| {
            p.matrices[0].sub(&target).unwrap().data().iter().map(|x| x * x).sum()
        });
        let mut params = ParamSet::single_matrix(1, DenseMatrix::zeros(m, n));
        let mut adapter = AdapterState::for_params(&params, nu as usize + 1);
        let mut w = WriteCounter::new();
        for t in 0..nu {
            lozo_step(&scorer, &mut params, &mut adapter, &cfg, t, &Minibatch::empty(), &mut w).unwrap();
        }
        let delta = adapter.entry(1).unwrap().update_dense();
        prop_assert!(rank_check(&delta, rank) <= 1e-10);
        prop_assert_eq!(w.writes, nu * (m * rank) as u64);
    }

    #[test]
    fn coefficient_is_the_symmetric_difference(
        lp in -1e3f64..1e3,
        lm in -1e3f64..1e3,
        eps in 1e-6f64..1e-1,
    ) {
        let e = Estimate::from_losses(lp, lm, eps);
        prop_assert_eq!(e.coefficient.to_bits(), ((lp - lm) / (2.0 * eps)).to_bits());
    }

    #[test]
    fn lozo_factors_are_seed_keyed(seed in 0u64..500, t in 0u64..200, nu in 1u64..60) {
        let (u1, v1) = lozo_direction(seed, 3, 5, 4, t, nu, 2).unwrap();
        let (u2, v2) = lozo_direction(seed, 3, 5, 4, t, nu, 2).unwrap();
        prop_assert_eq!(u1, u2);
        prop_assert_eq!(&v1, &v2);
        let start = (t / nu) * nu;
        let (_, v_start) = lozo_direction(seed, 3, 5, 4, start, nu, 2).unwrap();
        prop_assert_eq!(v1, v_start);
    }
}

#[test]
fn recorded_coefficients_are_exact() {
    let cfg = ZoConfig {
        nu: 3,
        learning_rate: 0.01,
        ..ZoConfig::default()
    };
    let target = quadratic_target(4, 6);
    let scorer = FnScorer::new(move |p: &ParamSet| {
        p.matrices[0]
            .sub(&target)
            .unwrap()
            .data()
            .iter()
            .map(|x| x.powi(4))
            .sum()
    });
    let mut params = ParamSet::single_matrix(1, DenseMatrix::zeros(4, 6));
    let mut adapter = AdapterState::for_params(&params, 4);
    let mut w = WriteCounter::new();
    for t in 0..20 {
        let rec = lozo_step(
            &scorer,
            &mut params,
            &mut adapter,
            &cfg,
            t,
            &Minibatch::empty(),
            &mut w,
        )
        .unwrap();
        assert!(rec.coefficient_is_exact(cfg.epsilon));
        assert_eq!(rec.beta, -cfg.learning_rate * rec.coefficient);
    }
}
