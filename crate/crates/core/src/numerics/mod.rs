//! Dense `f64` tensors, reverse-mode differentiation and gradient checking.

pub mod grid;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use gradcheck::grad_check;
pub use grid::GridLayout;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{layer_norm, matmul, softmax_rows, softmax_rows_masked, Tensor};

/// Layer norm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;
