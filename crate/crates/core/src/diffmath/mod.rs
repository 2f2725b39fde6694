//! Dense reverse-mode differentiation over `f64` matrices.
//!
//! A [`Graph`] is built per minibatch by calling its operation methods; each
//! call evaluates eagerly and records how to propagate gradients.
//! [`Graph::backward`] then sweeps the recorded nodes in reverse and
//! accumulates gradients into every node that depends on a variable or
//! parameter. Parameters live in a [`ParamStore`] outside the graph.

mod graph;
mod params;
pub mod special;

pub use graph::{Axis, Graph, NodeId, Reduce, UnaryOp};
pub use params::{Gradients, ParamId, ParamStore, Parameter};

use thiserror::Error;

pub type Tensor = ndarray::Array2<f64>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: argument {value} at index {index:?} is outside the domain")]
    Domain {
        op: &'static str,
        index: (usize, usize),
        value: f64,
    },
    #[error("{0}")]
    Contract(String),
}

#[cfg(test)]
mod tests;
