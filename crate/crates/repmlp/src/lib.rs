//! Structural re-parameterization for vision MLPs.

pub mod block;
pub mod error;
mod init;
pub mod layers;
pub mod ckpt;
pub mod count;
pub mod net;
pub mod reparam;
pub mod tensor;

pub use net::{
    build_net, convert_net, DownsampleKind, Embedding, NetConfig, Network, PRESET_NAMES,
};

pub use block::{Mode, RepMlpBlock, RepMlpBlockConfig};
pub use error::{Error, Result};
pub use layers::{bn_inference, conv2d, fc_forward, BnParams, ConvLayer, FcLayer, BN_EPS};
pub use reparam::{
    conv_to_fc, conv_to_fc_per_set, fuse_bn_conv, fuse_bn_grouped_fc, merge_local_into_channel,
    toeplitz_oracle, toeplitz_oracle_per_set, ToeplitzResult,
};
pub use tensor::{
    activate, broadcast_add_channel, global_avg_pool, restore_patches, split_patches, Activation,
    Matrix, Tensor4,
};
