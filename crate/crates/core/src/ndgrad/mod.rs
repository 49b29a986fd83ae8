//! Dense tensors with reverse-mode differentiation and momentum SGD.
//!
//! Every other module builds its math out of the operations here. Graphs are
//! dynamic: each operation records its parents, and [`Tensor::backward`]
//! walks them in reverse topological order.

mod conv;
pub mod gradcheck;
mod ops;
mod optim;
mod scalar;
mod tensor;

pub use optim::{OptimizerState, Sgd};
pub use scalar::{DType, Scalar};
pub use tensor::{take_zero_norm_events, Tensor};

#[cfg(test)]
mod tests;
