//! Differentiable tensor operations.

mod conv;
mod elementwise;
mod linear;
mod norm;
mod pool;

pub use conv::{conv1d_channels, conv2d, ConvParams};
pub use elementwise::{
    add_weighted, concat_channels, mul, mul_channelwise, relu, reshape, sigmoid, softmax_channels,
    sum_all,
};
pub(crate) use elementwise::softmax_channels_raw;
pub use linear::linear;
pub use norm::{batchnorm2d, NormMode};
pub use pool::{bilinear_upsample2x, global_avg_pool, maxpool2d};

/// Registered op names. The gradient-audit harness asserts it covers every
/// name listed here; adding an op without audit coverage fails that check.
pub mod names {
    pub const CONV2D: &str = "conv2d";
    pub const CONV1D_CHANNELS: &str = "conv1d_channels";
    pub const LINEAR: &str = "linear";
    pub const MAXPOOL2D: &str = "maxpool2d";
    pub const GLOBAL_AVG_POOL: &str = "global_avg_pool";
    pub const BILINEAR_UPSAMPLE2X: &str = "bilinear_upsample2x";
    pub const RELU: &str = "relu";
    pub const SIGMOID: &str = "sigmoid";
    pub const SOFTMAX_CHANNELS: &str = "softmax_channels";
    pub const BATCHNORM2D: &str = "batchnorm2d";
    pub const CONCAT_CHANNELS: &str = "concat_channels";
    pub const ADD_WEIGHTED: &str = "add_weighted";
    pub const MUL: &str = "mul";
    pub const MUL_CHANNELWISE: &str = "mul_channelwise";
    pub const RESHAPE: &str = "reshape";
    pub const SUM_ALL: &str = "sum_all";
    pub const REORGANIZE: &str = "reorganize";
    pub const INVERSE_REORGANIZE: &str = "inverse_reorganize";
    pub const CE_LOSS: &str = "ce_loss";
    pub const DICE_LOSS: &str = "dice_loss";
    pub const FOCAL_LOSS: &str = "focal_loss";

    pub const ALL: &[&str] = &[
        CONV2D,
        CONV1D_CHANNELS,
        LINEAR,
        MAXPOOL2D,
        GLOBAL_AVG_POOL,
        BILINEAR_UPSAMPLE2X,
        RELU,
        SIGMOID,
        SOFTMAX_CHANNELS,
        BATCHNORM2D,
        CONCAT_CHANNELS,
        ADD_WEIGHTED,
        MUL,
        MUL_CHANNELWISE,
        RESHAPE,
        SUM_ALL,
        REORGANIZE,
        INVERSE_REORGANIZE,
        CE_LOSS,
        DICE_LOSS,
        FOCAL_LOSS,
    ];
}
