//! Dense tensors, reverse-mode differentiation and the supporting numerics.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod rng;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_store, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Unary, Var};
pub use params::{ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::Tensor;
