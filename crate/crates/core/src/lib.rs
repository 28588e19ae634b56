//! Gradient-free class activation maps over a small CNN runtime.
//!
//! * [`tensor`], [`ops`], [`noise`]: dense `f32` tensors, kernels and
//!   counter-based Gaussian noise.
//! * [`model`]: manifest/blob loading, forward passes with activation
//!   capture, activation gradients.
//! * [`cam`]: Score-CAM, the two smoothed variants, Grad-CAM.
//! * [`metrics`], [`eval`]: average drop/increase, win rate,
//!   insertion/deletion AUC, energy pointing game, batch reports.
//! * [`imageio`], [`cli`]: preprocessing, heatmap rendering, command line.

pub mod cam;
pub mod cli;
pub mod eval;
pub mod imageio;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod ops;
pub mod tensor;

pub use cam::{ExplainConfig, Method, SaliencyMap};
pub use model::{ForwardTrace, Model};
pub use tensor::Tensor;
