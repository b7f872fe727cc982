//! Cross-modality (visible + infrared) feature fusion with dual enhancement.
//!
//! The crate holds everything the command-line front end drives:
//!
//! * [`tensor`], [`ops`], [`layers`], [`params`], [`rng`]: a small dense-tensor
//!   substrate where every operation has a hand-written vector-Jacobian product.
//! * [`gradcheck`]: central-difference verification of those products.
//! * [`deca`], [`depa`], [`focus`]: the channel-fusion, pixel-fusion and
//!   decoupled-focus blocks.
//! * [`model`]: a desk-scale dual-stream detector built from them.
//! * [`metrics`]: IoU, AP, mAP and log-average miss rate.
//! * [`synth`]: a generator for paired visible/infrared scenes.

pub mod ablation;
pub mod census;
pub mod deca;
pub mod depa;
pub mod error;
pub mod focus;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod rng;
pub mod selftest;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{Grads, ParamId, ParamStore};
pub use rng::SeededRng;
pub use tensor::{Real, Shape4, Tensor4};
