//! Dense `f64` tensors and a reverse-mode gradient tape.
//!
//! A [`Tape`] owns every value computed during one forward pass. Inputs are
//! recorded as leaves, primitives append their outputs, and [`Tape::backward`]
//! walks the record once in reverse.

mod kernels;
mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;
