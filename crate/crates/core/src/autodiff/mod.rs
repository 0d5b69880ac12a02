//! Tape-based reverse-mode automatic differentiation over [`Tensor`](crate::Tensor)s.

pub mod gradcheck;
mod graph;
pub mod kernels;

pub use graph::{Graph, Node, Var};
pub use kernels::ConvGeom;
