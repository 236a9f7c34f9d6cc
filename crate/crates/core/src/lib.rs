//! Deep structural causal shape models: normalising-flow covariate
//! mechanisms and a spectral mesh CVAE composed into a structural causal
//! model, with a synthetic cohort for ground-truth checks.

pub mod autodiff;
pub mod checkpoint;
pub mod cohort;
pub mod cvae;
mod error;
pub mod eval;
pub mod flows;
pub mod mesh;
pub mod model;
pub mod nn;
pub mod scm;

pub use error::{Error, Result};
