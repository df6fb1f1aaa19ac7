//! Dense f32 tensors with a define-by-run reverse-mode autodiff graph.
//!
//! The op set is what a small decoder-only transformer needs: matmul,
//! elementwise arithmetic, GELU/ReLU, (causal) softmax, layer norm,
//! embedding gather and cross-entropy, plus the reshaping glue between them.
//! A [`Graph`] is built fresh for every training step; parameters enter as
//! leaves and gradients are read back after [`Graph::backward`].

mod error;
mod gemm;
pub mod gradcheck;
mod graph;
mod tensor;

pub use error::{NumError, Result};
pub use gradcheck::{grad_check, grad_check_with, primitive_suite, GradCheckConfig, GradCheckReport, Stencil, TensorCheck};
pub use graph::{Graph, Var};
pub use tensor::{Init, Tensor};
