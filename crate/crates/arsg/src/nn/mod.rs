//! Tensor arithmetic and reverse-mode differentiation.

pub mod check;
pub mod graph;
pub mod tensor;

pub use check::grad_check;
pub use graph::{Graph, NodeRef, ParamId, ParamKind, ParamStore, Parameter};
pub use tensor::{Real, Tensor};
