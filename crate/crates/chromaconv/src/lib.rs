//! Color-equivariant convolutional networks.
//!
//! Classifiers whose feature maps transform predictably under global hue
//! rotation and saturation shift of the input image. The input is lifted to
//! one copy per group element, convolutions mix copies through
//! orbit-expanded filter banks, and a group max pool makes the head
//! invariant. Everything runs on a small reverse-mode autodiff engine with
//! an im2col convolution; no external ML framework.
//!
//! Module map:
//! - [`tensor`]: shapes, the gradient tape, convolution kernels
//! - [`colorspace`]: RGB/HSL conversion and the hue/saturation actions
//! - [`groups`]: group structure, lift elements, orbit plans, slot actions
//! - [`layers`]: lift, group convolution, batchnorm, pooling
//! - [`models`]: configs and the z2cnn / small-resnet builders
//! - [`data`]: IDX ingestion, colorization, the HSL1 dataset format
//! - [`train`]: Adam, the training loop, metrics, checkpoints
//! - [`cli`]: command workflows (also exposed as library functions)
//!
//! The `examples/` directory walks each capability end to end.

pub mod cli;
pub mod colorspace;
pub mod data;
pub mod error;
pub mod groups;
pub mod layers;
pub mod models;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
