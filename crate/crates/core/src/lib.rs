//! Prior-free continual learning: a single-head MLP trained task after task,
//! regularized by distillation on unlabeled auxiliary data with reliable
//! sample selection, plus fine-tuning, joint-training, label-only
//! distillation and experience-replay baselines.

pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod nn;
pub mod selection;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
