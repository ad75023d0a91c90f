//! Differentiable numerical kernel shared by every model component.

pub mod gradcheck;
pub mod kernels;
pub mod tape;
mod tensor;

pub use gradcheck::{compare_gradients, grad_check, weighted_sum, GradCheckReport};
pub use kernels::{
    activation, conv2d, layer_norm, linear, masked_softmax, softmax, Activation, LAYER_NORM_EPS,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
