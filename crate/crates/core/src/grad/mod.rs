//! A small dense computation graph with symbolic reverse-mode
//! differentiation.
//!
//! `Graph::vjp` appends the derivative computation to the graph itself, so a
//! loss may contain the input gradient of a network and still be
//! differentiated with respect to the parameters. `Graph::jvp` is an
//! independent forward-mode evaluator used to cross-check the reverse rules.

pub mod check;
mod graph;
mod tensor;

pub use graph::{set_fault, Bindings, Fault, Graph, NodeId, Op};
pub use tensor::Tensor;
