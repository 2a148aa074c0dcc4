//! Few-shot segmentation by aggregating 4D correlation volumes with
//! convolutional shifted-window transformers.
//!
//! The pipeline: a small backbone produces query/support feature pyramids,
//! [`correlation`] turns them into masked cosine volumes, [`embedding`]
//! reduces each volume with overlapping 4D convolutions, [`swin4d`]
//! aggregates it with 4D windowed self-attention, [`encoder`] chains the
//! pyramid levels coarse to fine, and [`decoder`] turns the result into a
//! mask. [`metrics`] and [`harness`] cover evaluation, data, training and I/O.

pub mod autograd;
pub mod correlation;
pub mod decoder;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod fastmath;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod swin4d;
pub mod tensor;

pub use error::{Result, VatError};
pub use tensor::Tensor;
