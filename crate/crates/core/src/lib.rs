//! EEG-to-text translation through a discrete codex: EEG is vectorised
//! (word-level band powers or a convolutional wave encoder), encoded,
//! quantized against a learned codebook and decoded into words by a small
//! transformer language model. Training runs in stages with plain SGD on a
//! built-in reverse-mode autodiff engine.

pub mod cli;
pub mod codex;
pub mod corpus;
pub mod diffcore;
pub mod error;
pub mod featurizer;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod seq2text;
pub mod trainer;
pub mod wave_encoder;

pub use error::{Error, Result};
