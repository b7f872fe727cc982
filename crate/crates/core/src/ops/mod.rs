//! Differentiable primitives: each forward function has a matching `*_backward`
//! computing its vector-Jacobian product.

pub mod activation;
pub mod broadcast;
pub mod conv;
pub mod norm;
pub mod pool;
pub mod softmax;

pub use activation::*;
pub use broadcast::*;
pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvSpec};
pub use norm::{group_norm, group_norm_backward, GroupNormCache, GroupNormGrads};
pub use pool::*;
pub use softmax::*;
