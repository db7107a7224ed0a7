//! Dense tensors with tape-based reverse-mode differentiation.

pub mod checkpoint;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_many, Coordinates, GradCheckReport};
pub use tape::{Precision, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
