use std::borrow::Cow;

use super::state::AdapterState;
use crate::numerics::DenseMatrix;
use crate::params::ParamSet;

/// Scoring-time view of a parameter set with an adapter applied.
///
/// Storage matrices without adapter contributions are borrowed; the rest are
/// scratch copies. Nothing here touches the underlying weights.
#[derive(Debug, Clone)]
pub struct ComposedParams<'a> {
    pub matrices: Vec<Cow<'a, DenseMatrix>>,
    pub vectors: Vec<Cow<'a, [f64]>>,
}

impl<'a> ComposedParams<'a> {
    pub fn new(params: &'a ParamSet, adapter: Option<&AdapterState>) -> Self {
        let mut matrices: Vec<Cow<'a, DenseMatrix>> =
            params.matrices.iter().map(Cow::Borrowed).collect();
        let mut vectors: Vec<Cow<'a, [f64]>> = params
            .vectors
            .iter()
            .map(|v| Cow::Borrowed(v.as_slice()))
            .collect();
        if let Some(adapter) = adapter {
            for t in params.matrix_targets() {
                let Some(entry) = adapter.entry(t.id) else {
                    continue;
                };
                if entry.update_slots.is_empty() && entry.perturb_slot.is_none() {
                    continue;
                }
                entry.add_contributions(matrices[t.storage].to_mut(), t.col_offset);
            }
            for t in params.vector_targets() {
                if let Some(p) = adapter.vector_perturbation(t.id) {
                    vectors[t.storage] = Cow::Owned(p.compose(&params.vectors[t.storage]));
                }
            }
        }
        Self { matrices, vectors }
    }

    /// Owned parameter set with every composition written out explicitly.
    pub fn materialize(&self, template: &ParamSet) -> ParamSet {
        let mut out = template.clone();
        for (dst, src) in out.matrices.iter_mut().zip(&self.matrices) {
            *dst = src.as_ref().clone();
        }
        for (dst, src) in out.vectors.iter_mut().zip(&self.vectors) {
            *dst = src.to_vec();
        }
        out
    }
}
