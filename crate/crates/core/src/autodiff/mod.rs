//! Reverse-mode differentiation over dense tensors.

mod gradcheck;
mod graph;

pub use gradcheck::{central_difference, grad_check, GradCheckReport};
pub use graph::{Graph, Var};
