//! Reverse-mode differentiation over dense `f64` tensors, plain SGD, finite
//! difference checking and parameter checkpoints.

mod checkpoint;
mod gradcheck;
mod graph;
mod params;

pub use checkpoint::{decode_params, encode_params, load_params, save_params, CHECKPOINT_MAGIC};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamSet, Tensor};

#[cfg(test)]
mod tests;
