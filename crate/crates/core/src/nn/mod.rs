//! Encoder, projector and time-head networks with hand-written backward
//! passes. Everything runs in 64-bit with single-threaded GEMM, so a forward
//! or backward pass is a deterministic function of its inputs.

mod layers;
mod model;

pub use layers::{
    batchnorm_backward, batchnorm_eval, batchnorm_train, conv_out, linear_backward,
    linear_forward, relu, relu_backward, BnCache, BN_EPS, BN_MOMENTUM,
};
pub use model::{
    EncoderCache, EncoderKind, Grads, Mode, Model, ModelConfig, ParamSpec, ProjectorCache,
    TimeHeadCache, INPUT_MEAN, INPUT_STD,
};
