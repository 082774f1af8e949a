//! The objective interface the optimizer drives.

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterState;
use crate::error::Result;
use crate::model::Minibatch;
use crate::params::ParamSet;

/// Arithmetic used inside a scoring call. Composition always happens in
/// `f64`; `Real32` casts the composed weights and runs the forward in `f32`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Real64,
    Real32,
}

/// Evaluates `L(θ)` for a base parameter set seen through an optional
/// adapter. Implementations must be pure: no mutation of `params` or
/// `adapter`, and equal inputs give bitwise equal outputs.
pub trait Scorer: Sync {
    fn score(
        &self,
        params: &ParamSet,
        adapter: Option<&AdapterState>,
        batch: &Minibatch,
        precision: Precision,
    ) -> Result<f64>;

    /// Instrumented cost of one call, in multiply-accumulate units.
    fn cost_units(&self, _params: &ParamSet, _batch: &Minibatch) -> u64 {
        0
    }

    /// Classification accuracy on `pool`, for objectives that have one.
    fn eval_accuracy(
        &self,
        _params: &ParamSet,
        _adapter: Option<&AdapterState>,
        _pool: &Minibatch,
        _precision: Precision,
    ) -> Result<Option<f64>> {
        Ok(None)
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn score(
        &self,
        params: &ParamSet,
        adapter: Option<&AdapterState>,
        batch: &Minibatch,
        precision: Precision,
    ) -> Result<f64> {
        (**self).score(params, adapter, batch, precision)
    }

    fn cost_units(&self, params: &ParamSet, batch: &Minibatch) -> u64 {
        (**self).cost_units(params, batch)
    }

    fn eval_accuracy(
        &self,
        params: &ParamSet,
        adapter: Option<&AdapterState>,
        pool: &Minibatch,
        precision: Precision,
    ) -> Result<Option<f64>> {
        (**self).eval_accuracy(params, adapter, pool, precision)
    }
}

/// Objective given by a closure over the composed parameters. Used for
/// analytic toy objectives.
pub struct FnScorer<F> {
    f: F,
}

impl<F> FnScorer<F>
where
    F: Fn(&ParamSet) -> f64 + Sync,
{
    pub fn new(f: F) -> Self {
        Self { f }
    }
}

impl<F> Scorer for FnScorer<F>
where
    F: Fn(&ParamSet) -> f64 + Sync,
{
    fn score(
        &self,
        params: &ParamSet,
        adapter: Option<&AdapterState>,
        _batch: &Minibatch,
        _precision: Precision,
    ) -> Result<f64> {
        let view = crate::adapter::ComposedParams::new(params, adapter);
        Ok((self.f)(&view.materialize(params)))
    }
}

/// Returns a fixed loss without touching the parameters. Stands in for a
/// forward pass of constant cost in write-traffic benchmarks.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer {
    pub loss: f64,
}

impl Scorer for ConstantScorer {
    fn score(
        &self,
        _params: &ParamSet,
        _adapter: Option<&AdapterState>,
        _batch: &Minibatch,
        _precision: Precision,
    ) -> Result<f64> {
        Ok(self.loss)
    }
}
