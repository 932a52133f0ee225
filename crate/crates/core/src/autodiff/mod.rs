//! Reverse-mode differentiation over real tensors.
//!
//! Complex quantities are stored as real tensors with a trailing axis of
//! length 2.  For a real loss `L` the gradient of a complex entry `z` is
//! stored as `dL/dRe z + i dL/dIm z`, so every rule below is the
//! real-inner-product adjoint of its forward map.

mod adam;
mod cplx;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use tape::{gradient, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
