//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every operation is evaluated eagerly when it is recorded on a [`Tape`];
//! [`Tape::backward`] then walks the tape once in reverse creation order,
//! accumulating one adjoint contribution per edge. Broadcasting is limited
//! to a 1x1 operand against a tensor of any shape.

mod check;
mod tape;
mod tensor;

pub use check::grad_check;
pub use tape::{Gradients, NodeId, OpKind, Tape};
pub(crate) use tape::softmax_tensor;
pub use tensor::{Shape, Tensor};

#[cfg(test)]
mod tests;
