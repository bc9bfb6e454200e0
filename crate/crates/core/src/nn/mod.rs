//! Neural-network primitives: convolutions, normalizations, activations.
//!
//! Every kernel is a pure function over [`Tensor`](crate::tensor::Tensor)s
//! with a matching `*_backward` used by the autodiff tape.

pub mod activation;
pub mod conv;
pub mod norm;

pub use activation::{gelu, leaky_relu, silu, softmax, Activation, LEAKY_SLOPE};
pub use conv::{
    causal_depthwise_conv1d, conv2d, conv2d_naive, conv_transpose2d, Conv2dParams, ConvGeometry,
};
pub use norm::{instance_norm, l2_normalize, layer_norm, NormParams, NORM_EPS};
