use crate::adapter::{AdapterState, PerturbSign};
use crate::error::{Result, ZoError};
use crate::model::Minibatch;
use crate::params::ParamSet;
use crate::scoring::{Precision, Scorer};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub coefficient: f64,
    pub loss_plus: f64,
    pub loss_minus: f64,
}

impl Estimate {
    pub fn from_losses(loss_plus: f64, loss_minus: f64, epsilon: f64) -> Self {
        Self {
            coefficient: (loss_plus - loss_minus) / (2.0 * epsilon),
            loss_plus,
            loss_minus,
        }
    }
}

/// Scores the installed perturbation at `+ε` and `−ε` and returns the
/// two-point coefficient. Exactly two scoring calls, no weight writes; the
/// sign is back at `Off` on return, error or not.
pub fn estimate_coefficient<S: Scorer + ?Sized>(
    scorer: &S,
    params: &ParamSet,
    state: &mut AdapterState,
    epsilon: f64,
    batch: &Minibatch,
    precision: Precision,
) -> Result<Estimate> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(ZoError::config(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if !state.has_active_perturbation() {
        return Err(ZoError::input("no perturbation installed"));
    }
    let mut score = |sign| {
        state.set_sign(sign);
        let r = scorer.score(params, Some(state), batch, precision);
        state.set_sign(PerturbSign::Off);
        r
    };
    let loss_plus = score(PerturbSign::Plus)?;
    let loss_minus = score(PerturbSign::Minus)?;
    Ok(Estimate::from_losses(loss_plus, loss_minus, epsilon))
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::*;
    use crate::adapter::LoraSlot;
    use crate::numerics::DenseMatrix;
    use crate::scoring::FnScorer;

    fn setup(w: DenseMatrix, z: DenseMatrix, eps: f64) -> (ParamSet, AdapterState) {
        let params = ParamSet::single_matrix(0, w);
        let mut st = AdapterState::for_params(&params, 4);
        // Rank-n factorization z = z · Iᵀ.
        let n = z.cols();
        st.install_perturbation(
            0,
            LoraSlot::new(z, DenseMatrix::identity(n), 1.0).unwrap(),
            eps,
        )
        .unwrap();
        (params, st)
    }

    #[test]
    fn linear_objective_gives_sum_of_direction() {
        let sum = FnScorer::new(|p: &ParamSet| p.matrices[0].data().iter().sum());
        for eps in [1e-3, 0.5, 3.0] {
            let (params, mut st) = setup(
                DenseMatrix::zeros(2, 2),
                DenseMatrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]),
                eps,
            );
            let e = estimate_coefficient(
                &sum,
                &params,
                &mut st,
                eps,
                &Minibatch::empty(),
                Precision::Real64,
            )
            .unwrap();
            assert!((e.coefficient - 4.0).abs() < 1e-12, "{}", e.coefficient);
        }
    }

    #[test]
    fn quadratic_objective_is_exact() {
        let quad = FnScorer::new(|p: &ParamSet| {
            0.5 * p.matrices[0].data().iter().map(|x| x * x).sum::<f64>()
        });
        let w = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let (params, mut st) = setup(
            w.clone(),
            DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]),
            0.25,
        );
        let e = estimate_coefficient(
            &quad,
            &params,
            &mut st,
            0.25,
            &Minibatch::empty(),
            Precision::Real64,
        )
        .unwrap();
        assert_eq!(e.coefficient, 1.0);
        let z = DenseMatrix::from_rows(&[&[0.5, -1.0], &[2.0, 0.25]]);
        for eps in [1e-4, 1e-2, 1.0] {
            let (params, mut st) = setup(w.clone(), z.clone(), eps);
            let e = estimate_coefficient(
                &quad,
                &params,
                &mut st,
                eps,
                &Minibatch::empty(),
                Precision::Real64,
            )
            .unwrap();
            let want = w.dot(&z).unwrap();
            assert!(
                (e.coefficient - want).abs() <= 1e-9 * want.abs().max(1.0),
                "{eps}"
            );
        }
    }

    #[test]
    fn flat_objective_gives_zero() {
        let flat = FnScorer::new(|_: &ParamSet| 3.5);
        let (params, mut st) = setup(DenseMatrix::identity(2), DenseMatrix::identity(2), 1e-3);
        let e = estimate_coefficient(
            &flat,
            &params,
            &mut st,
            1e-3,
            &Minibatch::empty(),
            Precision::Real64,
        )
        .unwrap();
        assert_eq!(e.coefficient, 0.0);
    }

    #[test]
    fn two_calls_and_sign_restored() {
        let calls = AtomicUsize::new(0);
        let counting = FnScorer::new(|p: &ParamSet| {
            calls.fetch_add(1, Ordering::SeqCst);
            p.matrices[0].get(0, 0)
        });
        let (params, mut st) = setup(DenseMatrix::identity(2), DenseMatrix::identity(2), 1e-3);
        let before = params.clone();
        let e = estimate_coefficient(
            &counting,
            &params,
            &mut st,
            1e-3,
            &Minibatch::empty(),
            Precision::Real64,
        )
        .unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 2);
        assert_eq!(e.coefficient, (e.loss_plus - e.loss_minus) / (2.0 * 1e-3));
        assert_eq!(st.entry(0).unwrap().perturb_sign, PerturbSign::Off);
        assert_eq!(params, before);
    }

    #[test]
    fn rejects_bad_epsilon_and_missing_perturbation() {
        let f = FnScorer::new(|_: &ParamSet| 0.0);
        let (params, mut st) = setup(DenseMatrix::identity(2), DenseMatrix::identity(2), 1e-3);
        for eps in [0.0, -1e-3, f64::NAN] {
            let r = estimate_coefficient(
                &f,
                &params,
                &mut st,
                eps,
                &Minibatch::empty(),
                Precision::Real64,
            );
            assert!(matches!(r, Err(ZoError::Config(_))));
        }
        st.clear_perturbations();
        assert!(estimate_coefficient(
            &f,
            &params,
            &mut st,
            1e-3,
            &Minibatch::empty(),
            Precision::Real64
        )
        .is_err());
    }
}
