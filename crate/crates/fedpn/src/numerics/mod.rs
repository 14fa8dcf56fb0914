//! Dense-array math, reverse-mode autodiff with stop-gradient, special
//! functions and first-order optimizers.

mod array;
mod dd;
mod graph;
mod optim;
mod special;

pub use array::DenseArray;
pub use graph::{GradientMap, NodeId, ValueGraph};
pub use optim::{OptimizerKind, OptimizerState};
pub use special::{digamma, lgamma, trigamma};
