//! Minimal CNN engine: same-size convolution, ReLU, batch normalization, MSE
//! loss, Adam and finite-difference gradient checking.

pub mod activation;
pub mod adam;
pub mod batchnorm;
pub mod conv;
pub mod gradcheck;
pub mod layer;
pub mod loss;
pub mod tensor;

pub use activation::{relu, relu_backward};
pub use adam::{AdamConfig, AdamState};
pub use batchnorm::{batchnorm_backward, batchnorm_forward, BatchNorm, BnCache, BnGrads, Mode};
pub use conv::{conv2d_backward, conv2d_forward, ConvGrads};
pub use gradcheck::{
    check_gradient, check_stack, gradient_suite, Component, GradCheckReport, StackReport, SuiteCase,
};
pub use layer::{stack_backward, stack_forward, ConvLayer, LayerCache, LayerGrads};
pub use loss::mse_loss;
pub use tensor::Tensor4;
