//! Rank-1 Bayesian neural networks.
//!
//! Layers carry a shared deterministic kernel `W` and mixture distributions
//! over rank-1 factors `r` (output side) and `s` (input side); each example
//! sees the weight `W ∘ r sᵀ` for its own sampled factors. The crate bundles
//! the tape-based differentiation engine the layers run on, the variational
//! objectives, evaluation metrics, desk-scale data pipelines, an SGD trainer,
//! and a numeric harness comparing the local variance of full-rank and rank-1
//! multiplicative perturbations.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod distributions;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod tensor;
pub mod theorem;
pub mod trainer;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
