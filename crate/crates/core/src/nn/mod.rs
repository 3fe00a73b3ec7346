//! Dense numerics: matrices, a reverse-mode tape, MLPs, Adam and finite-difference checks.

mod adam;
mod fdcheck;
mod matrix;
mod mlp;
mod tape;

pub use adam::AdamState;
pub use fdcheck::{finite_difference_check, FdReport};
pub use matrix::{pairwise_sum, Matrix, StyleTensor3D};
pub use mlp::{linear_forward, per_style_linear_forward, Activation, Layer, Mlp, MlpSpec, Weight, WeightMode};
pub use tape::{Bind, Gradients, Tape, Var};
pub(crate) use tape::sigmoid;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Anything that owns a fixed, ordered list of trainable tensors.
pub trait Parameters {
    fn tensors(&self) -> Vec<&Matrix>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;

    fn num_tensors(&self) -> usize {
        self.tensors().len()
    }

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors().iter().map(|t| t.shape()).collect()
    }
}
