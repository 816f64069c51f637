//! Differentiable tensor engine: a reverse-mode tape over `ndarray` arrays
//! with the op set the pipeline needs (convolution, bilinear sampling,
//! window-volume scores, reductions) plus finite-difference checking helpers.

mod conv;
pub mod fd;
pub mod ops;
mod tape;

pub use tape::{backward, Gradients, Tape, Var};
