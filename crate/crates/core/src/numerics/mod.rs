//! Tensor storage, seeded sampling and the differentiable layer kernels.

pub mod kernels;
pub mod rng;
pub mod tensor;

pub use kernels::{
    conv2d, conv2d_backward, conv_out_len, dense, dense_backward, pool2d, pool2d_backward, pool2d_forward,
    Conv2dGrads, DenseGrads, PoolKind, PoolTrace,
};
pub use rng::{sample_gaussian, sample_rademacher, RngStream};
pub use tensor::Tensor;
