//! Dense tensors, the differentiable layer set, and gradient verification.

pub mod gradcheck;
pub mod ops;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradReport};
pub use ops::{
    conv2d, conv2d_backward, dense, dense_backward, maxpool2d, maxpool2d_backward,
    maxpool2d_indexed, relu, relu_backward, softmax_backward, softmax_rows, valid_extent,
    ProbBatch,
};
pub use tensor::{Param, ParamSet, Real, Tensor};
