//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations are recorded eagerly onto a [`Tape`]. [`backward`] walks the tape
//! in reverse; with `create_graph` set, the backward pass is recorded onto the
//! same tape so that gradients can themselves be differentiated (double
//! backpropagation). Tensors not attached to any tape are plain values.

mod backward;
mod error;
pub mod gradcheck;
pub mod numeric;
mod ops;
mod sparse;
mod tape;
mod tensor;

pub use backward::{backward, grad, jacobian, Gradient, Jacobian};
pub use error::{AutodiffError, Result};
pub use ops::{record, OpKind};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
