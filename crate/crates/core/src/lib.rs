//! Zeroth-order fine-tuning as an inference-style workload.
//!
//! The crate pairs a conventional perturb/score/restore/update training loop
//! ([`baseline`]) with a serving-style path ([`runtime`]) that scores
//! composed adapter views and accumulates updates on low-rank factors. Both
//! consume the same keyed direction streams ([`numerics`]) so their
//! trajectories can be compared step by step ([`verify`]).

pub mod adapter;
pub mod baseline;
pub mod error;
pub mod experiment;
pub mod model;
pub mod numerics;
pub mod params;
pub mod run;
pub mod runtime;
pub mod scoring;
pub mod verify;
pub mod zo;

pub use error::{Result, ZoError};
