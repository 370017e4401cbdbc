//! Dense tensors and a tape-based reverse-mode differentiator.
//!
//! Values live on a [`Tape`] as they are computed; [`Tape::backward`] sweeps
//! the tape in reverse and returns adjoints for every node that requires a
//! gradient. Leaves created from a [`Tensor`] with `requires_grad` set receive
//! gradients; constants do not.

mod real;
mod tape;
mod tensor;

pub mod gradcheck;

pub use real::{DType, Real};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS, MASK_SURROGATE};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
}

impl NumericsError {
    pub(crate) fn dim(op: &'static str, detail: String) -> Self {
        NumericsError::Dimension { op, detail }
    }
}

#[cfg(test)]
mod tests;
