//! Pure tensor kernels. Each forward is a plain function of its inputs; the
//! matching backward kernels are used by [`crate::autodiff`].

pub mod conv;
pub mod elementwise;
pub mod norm;
pub mod pool;
pub mod resample;

pub use conv::{conv2d, conv2d_raw, linear, ConvGeometry, ConvWeights};
pub use elementwise::{
    activate, binary, channel_shuffle, channel_unshuffle, concat_channels, sigmoid, slice_channels,
    softplus, split_channels, Activation, BinOp,
};
pub use norm::{group_norm, layer_norm, GROUP_NORM_EPS, LAYER_NORM_EPS};
pub use pool::{adaptive_avg_pool, global_max_pool, max_pool2, pool, PoolKind};
pub use resample::upsample_bilinear;
