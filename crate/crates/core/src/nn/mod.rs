//! Small differentiable-programming kit: matrices, a reverse-mode tape, and
//! the layers the encoders and heads are built from.

pub mod functional;
pub mod gradcheck;
pub mod layers;
mod params;
mod tape;
mod tensor;

pub use functional::softmax_rows;
pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor2;

pub(crate) use tensor::dot;

#[cfg(test)]
mod tests;
