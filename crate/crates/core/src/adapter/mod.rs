//! LoRA-slot algebra.
//!
//! Both the accumulated training state and the temporary ZO perturbation are
//! low-rank slots over a frozen base. A probe weight is
//! `W₀ + Σ sᵢAᵢBᵢᵀ ± ε·sₚAₚBₚᵀ`; composing it is a read-only view, while the
//! optimizer only ever writes left factors and, at window boundaries, folds a
//! slot back into its base in one burst.

mod quant;
mod slot;
mod state;
mod view;

pub use quant::{quantize_base, QuantizedBase};
pub use slot::{fold_packed, fold_window, merge_slots, LoraSlot};
pub use state::{
    compose_probe, AdapterEntry, AdapterManifest, AdapterState, BaseRef, ManifestEntry,
    PerturbSign, VectorPerturbation, DEFAULT_SLOT_CAP,
};
pub use view::ComposedParams;
