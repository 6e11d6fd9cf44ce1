//! Dense tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! then walks it in reverse. Parameters live outside the graph in
//! [`Parameter`]s and are bound to leaves with [`Graph::param`].

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod param;
mod tensor;

pub use gradcheck::{grad_check, param_grad_check, relative_error, ParamCheck, Probes};
pub use graph::{Activation, BinaryKind, Graph, ReduceKind, Var};
pub use param::{Module, ParamId, Parameter};
pub use tensor::{with_precision, Precision, Tensor};

