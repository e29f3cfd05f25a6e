//! Deterministic dense-tensor engine: kernels, layers with cached backward
//! state, the optimizer and the checkpoint container.

pub mod activation;
pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod head;
pub mod norm;
pub mod param;
pub mod tensor;

pub use activation::{activation, ActKind, Activation};
pub use conv::{conv2d, conv2d_backward, Conv2d, ConvGeom};
pub use head::{classifier_head, softmax_cross_entropy, ClassifierHead, Dense, SqueezeExcite};
pub use norm::{BatchNorm, Mode, BN_EPS, BN_MOMENTUM};
pub use param::{cosine_lr, Parameter, Sgd};
pub use tensor::{Shape, Tensor};
