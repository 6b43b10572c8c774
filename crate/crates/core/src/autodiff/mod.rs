//! Differentiable 4-D tensor substrate: BCHW `f32` tensors, a reverse-mode
//! gradient engine, and the convolution / elementwise kernels the network is
//! assembled from.
//!
//! Graphs are plain DAGs of reference-counted nodes. A tensor's payload is
//! immutable once built; gradients are the only interior-mutable state and
//! accumulate on leaves. Every kernel iterates in a fixed order (parallel
//! paths split work into disjoint output chunks), so results are bit-stable
//! across runs and thread counts.

mod conv;
mod ops;
pub(crate) mod par;
mod tensor;

pub use conv::{conv2d, conv_transpose2d, ConvSpec};
pub use ops::{
    add, add_scalar, clamp, concat_channels, div, mean_all, mul, relu, scale, slice_channels,
    sub, tanh_act,
};
pub use tensor::{no_grad, Shape, Tensor, TensorError};

pub type Result<T> = std::result::Result<T, TensorError>;
