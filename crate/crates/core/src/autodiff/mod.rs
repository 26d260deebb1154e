//! Reverse-mode differentiation, forward-mode directional derivatives and
//! forward-over-reverse Hessian-vector products on a small tensor tape.

mod api;
mod graph;
pub mod oracle;
mod real;

pub use api::{
    grad, grad_and_hvp, hvp, jvp, per_sample_grads, per_sample_map, value, value_and_grad,
    BatchObjective, PerSampleGradients, SampleLoss, SampleObjective, ScalarFunction,
};
pub use graph::{Graph, NodeId};
pub use oracle::{dense_hessian, dense_hessian_hvp, fd_grad, DEFAULT_FD_STEP};
pub use real::{Dual, Real};
