//! Forward and backward kernels on NCHW tensors.
//!
//! Every function here is a pure function of its arguments. Reduction order
//! per output element is fixed, so repeated calls are bit-identical.

mod activation;
mod conv;
pub(crate) mod gemm;
mod linear;
mod norm;
mod pool;

pub use activation::{gelu, gelu_backward, relu, relu_backward};
pub use conv::{conv2d, conv2d_backward, im2col, ConvGeometry, ConvGrads};
pub use linear::{linear, linear_backward, LinearGrads};
pub use norm::{
    batch_norm2d, batch_norm2d_backward, layer_norm, layer_norm_backward, layer_norm_with_cache,
    BatchNormCache,
    BatchNormMode, LayerNormCache, NormGrads,
};
pub use pool::{
    global_avg_pool, global_avg_pool_backward, max_pool2d, max_pool2d_backward, MaxPoolIndices,
};
