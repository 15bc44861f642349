//! Minimal reverse-mode automatic differentiation over f64 tensors.
//!
//! Three pieces: [`Tensor`] (shared storage with an optional gradient
//! buffer), [`Tape`] (records one forward pass, replays it backward), and
//! [`gradcheck`] (finite-difference verification of every operation).

pub(crate) mod kernels;
mod tape;
mod tensor;

pub mod gradcheck;

pub use tape::Tape;
pub use tensor::Tensor;
