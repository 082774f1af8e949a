//! A tiny decoder-only transformer scored on option tokens, its synthetic
//! classification task, and a finite-difference gradient oracle.

mod gradcheck;
mod task;
mod transformer;

pub use gradcheck::{cosine, directional_fd, flatten, full_gradient_fd};
pub use task::{generate_task, Example, Minibatch, PlantedRule, TaskConfig, TaskSplits};
pub use transformer::{
    eval_accuracy, forward_score, projection_id, ModelConfig, ModelParams, Projection,
    TransformerScorer, EMBEDDING_ID,
};
