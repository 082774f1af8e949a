use crate::error::{Result, ZoError};
use crate::params::ParamSet;
use crate::scoring::{Precision, Scorer};

use super::task::Minibatch;

/// Central-difference gradient of every scalar in `params`, returned in the
/// same layout. Each coordinate costs two scoring calls, so this is only
/// meant for small models.
pub fn full_gradient_fd<S: Scorer + ?Sized>(
    scorer: &S,
    params: &ParamSet,
    batch: &Minibatch,
    h: f64,
) -> Result<ParamSet> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(ZoError::config("finite-difference step must be positive"));
    }
    let mut work = params.clone();
    let mut grad = params.clone();
    let two_h = 2.0 * h;
    for m in 0..params.matrices.len() {
        for idx in 0..params.matrices[m].data().len() {
            let saved = work.matrices[m].data()[idx];
            work.matrices[m].data_mut()[idx] = saved + h;
            let lp = scorer.score(&work, None, batch, Precision::Real64)?;
            work.matrices[m].data_mut()[idx] = saved - h;
            let lm = scorer.score(&work, None, batch, Precision::Real64)?;
            work.matrices[m].data_mut()[idx] = saved;
            grad.matrices[m].data_mut()[idx] = (lp - lm) / two_h;
        }
    }
    for v in 0..params.vectors.len() {
        for idx in 0..params.vectors[v].len() {
            let saved = work.vectors[v][idx];
            work.vectors[v][idx] = saved + h;
            let lp = scorer.score(&work, None, batch, Precision::Real64)?;
            work.vectors[v][idx] = saved - h;
            let lm = scorer.score(&work, None, batch, Precision::Real64)?;
            work.vectors[v][idx] = saved;
            grad.vectors[v][idx] = (lp - lm) / two_h;
        }
    }
    Ok(grad)
}

/// Central difference along one direction laid out like `params`.
pub fn directional_fd<S: Scorer + ?Sized>(
    scorer: &S,
    params: &ParamSet,
    direction: &ParamSet,
    batch: &Minibatch,
    h: f64,
) -> Result<f64> {
    let shift = |sign: f64| -> Result<ParamSet> {
        let mut p = params.clone();
        for (w, z) in p.matrices.iter_mut().zip(&direction.matrices) {
            for (a, b) in w.data_mut().iter_mut().zip(z.data()) {
                *a += sign * h * b;
            }
        }
        for (w, z) in p.vectors.iter_mut().zip(&direction.vectors) {
            for (a, b) in w.iter_mut().zip(z) {
                *a += sign * h * b;
            }
        }
        Ok(p)
    };
    let lp = scorer.score(&shift(1.0)?, None, batch, Precision::Real64)?;
    let lm = scorer.score(&shift(-1.0)?, None, batch, Precision::Real64)?;
    Ok((lp - lm) / (2.0 * h))
}

/// Flattens every scalar of a parameter set, matrices first.
pub fn flatten(params: &ParamSet) -> Vec<f64> {
    let mut out = Vec::new();
    for m in &params.matrices {
        out.extend_from_slice(m.data());
    }
    for v in &params.vectors {
        out.extend_from_slice(v);
    }
    out
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}
