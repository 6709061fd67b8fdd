//! Reverse-mode automatic differentiation over dense tensors.

pub mod check;
mod graph;
pub mod hessian;
mod scalar;

pub use graph::{BinaryOp, Gradients, Graph, ReduceOp, UnaryOp, Var};
pub use hessian::{hessian, hessian_quadratic_form, ScalarFunction};
pub use scalar::{Dual, Real};
