//! The structural causal model over covariates and mesh.

mod engine;
mod graph;

pub use engine::{ExogenousState, LatentAbduction, ModelSample};
pub use graph::{CausalGraph, CovariateRecord, Intervention, Node};
