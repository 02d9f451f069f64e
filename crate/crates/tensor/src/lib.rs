//! Dense CPU tensors with a reverse-mode autodiff tape.
//!
//! Only the operations the generator, discriminator, encoder and loss code
//! need are provided. Everything is single-threaded and deterministic.

pub mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use scalar::Scalar;
pub use tape::{Grads, Tape, Var};
pub use tensor::{broadcast_shape, Conv2dSpec, PadMode, Tensor};
