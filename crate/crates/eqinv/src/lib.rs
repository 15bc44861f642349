//! Equivariant contrastive pretraining, environment discovery, and masked
//! invariant fine-tuning on synthetic biased image data.
//!
//! The pipeline has three stages:
//!
//! 1. **Pretrain** an encoder with a contrastive objective over augmented
//!    view pairs ([`ssl`]).
//! 2. **Discover environments** per class by ranking adjusted similarity to
//!    class anchors and splitting each class in half ([`envs`]).
//! 3. **Fine-tune** a classifier through a learnable feature mask with an
//!    invariance penalty across the discovered environments ([`objective`],
//!    [`train`]).
//!
//! Everything is deterministic given a seed: data generation, augmentation,
//! initialization, and batch order all draw from named substreams of one
//! root seed ([`rng`]).

pub mod autodiff;
pub mod data;
pub mod envs;
pub mod error;
pub mod model;
pub mod optim;
pub mod ssl;
pub mod rng;

pub use autodiff::{Tape, Tensor};
pub use error::{EqInvError, Result};
