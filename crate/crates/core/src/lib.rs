//! Burst image restoration engine.
//!
//! Aligns a burst of degraded frames with modulated deformable convolutions,
//! exchanges information across frames through pseudo-burst features, and
//! merges them back into one image with attention-weighted group upsampling.
//! Everything runs on the small reverse-mode autodiff core in [`autodiff`].

pub mod autodiff;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod seed;
pub mod selftest;
pub mod sim;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use tensor::{DType, Float, Init, Tensor};
