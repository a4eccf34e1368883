//! Pure forward/backward kernels. Every operator here has an explicit
//! analytic backward companion; the [`crate::tape`] strings them together.

pub mod conv;
pub mod elementwise;
pub mod sample;

pub use conv::{
    conv2d, conv2d_backward, conv2d_output_extent, depthwise_conv2d, depthwise_conv2d_backward,
    depthwise_separable_conv, Conv2dConfig, ConvGrads, Padding,
};
pub use elementwise::{
    add, channel_norm, channel_norm_backward, concat_channels, hadamard, leaky_relu,
    leaky_relu_backward, sigmoid, sigmoid_backward, sigmoid_scalar, softmax_channelwise,
    softmax_channelwise_backward, split_channels, sub, NormCache, LEAKY_SLOPE,
};
pub use sample::{
    avg_pool2, avg_pool2_backward, bilinear_sample, bilinear_sample_backward, nearest_indices,
    resize_bilinear, resize_bilinear_backward, sample_signature, upsample_bilinear, SamplePadding,
};
