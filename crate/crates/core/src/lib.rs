//! Single-image raindrop removal with an adjacent-aggregation
//! encoder/decoder network, built on a self-contained differentiable tensor
//! core.
//!
//! The crate is organized by pipeline stage:
//!
//! - [`autodiff`]: BCHW `f32` tensors, reverse-mode gradients, convolution
//!   kernels (data-parallel with the default `parallel` feature, bit-identical
//!   sequential fallback without it);
//! - [`colorspace`]: RGB <-> YUV conversion, residual analysis, channel
//!   swapping;
//! - [`net`]: the aggregation network and its variants;
//! - [`objective`]: MSE + SSIM training losses and PSNR/SSIM metrics;
//! - [`data`]: paired datasets, PNG codec, patch sampling, synthetic raindrop
//!   degradation;
//! - [`training`]: Adam, the learning-rate schedule, the training loop, and
//!   binary checkpoints.

pub mod autodiff;
pub mod colorspace;
pub mod data;
pub mod net;
pub mod objective;
pub mod training;
