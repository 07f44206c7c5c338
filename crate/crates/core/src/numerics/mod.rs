//! Dense tensors, reverse-mode differentiation, dense layers and Adam.

mod adam;
mod layer;
mod tape;
mod tensor;

pub use adam::Adam;
pub use layer::{Activation, BoundDense, DenseLayer};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{leaky_relu, sigmoid, softmax, Tensor2, LEAKY_RELU_SLOPE};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("usage error: {0}")]
    Usage(String),
}
