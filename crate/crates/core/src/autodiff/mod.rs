//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward evaluation; a single
//! reverse sweep from a scalar root yields the gradient of every leaf created
//! with [`Tape::param`]. Leaves created with [`Tape::constant`] and anything
//! computed only from constants are skipped during the sweep.

mod tape;
mod tensor;

pub use tape::{finite_diff_check, Gradients, Tape, Var};
pub use tensor::Tensor;
