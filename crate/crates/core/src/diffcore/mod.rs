//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! Values are recorded on a [`Tape`] as operations execute; [`Tape::backward`]
//! walks the record in reverse and returns gradients for every trainable leaf.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use tape::{reflect_index, Activation, Gradients, Tape, Var};
pub use tensor::Tensor;
