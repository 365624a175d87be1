//! Multi-task residual 1D-CNN for 12-lead ECG classification.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: reverse-mode autodiff over the handful of operations the
//!   network needs, plus Adam.
//! * [`model`]: the 34-convolution residual trunk with independent logistic
//!   heads.
//! * [`synth`]: a labeled synthetic 12-lead ECG generator.
//! * [`dataset`]: label extraction, minority-class resampling, splits,
//!   batching and the on-disk record format.
//! * [`train`]: the training loop and checkpoints.
//! * [`metrics`]: per-class F1 and the single- vs multi-head comparison.

pub mod tensor;
pub mod dataset;
pub mod model;
pub mod record;
pub mod rng;
pub mod synth;
pub mod train;
pub mod metrics;
