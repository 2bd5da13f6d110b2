//! Dense tensors with a reverse-mode gradient tape.
//!
//! A [`Tape`] records every operation applied to its nodes. Parameters are
//! registered with [`Tape::track`], which stamps the tensor with the node
//! handle so that [`Tape::write_grad`] can route the accumulated gradient
//! back into the tensor's grad buffer after [`Tape::backward`].

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{ElementwiseOp, NodeId, Tape};
pub use tensor::Tensor;

/// Lower bound used before every logarithm of a probability.
pub const PROB_EPS: f64 = 1e-7;
