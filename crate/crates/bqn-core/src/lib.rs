//! Sampling-free Bayesian quantized networks.
//!
//! The engine learns factorized categorical posteriors over quantized weights
//! by deterministic moment/PMF propagation with closed-form gradients, and
//! evaluates trained posteriors by analytic inference, Monte-Carlo sampling
//! over drawn quantized networks, or MAP compression.
//!
//! Module map:
//! - [`grid`], [`categorical`], [`moments`]: distributions over the
//!   quantization grid (normalization, moments, entropy, sampling, MAP).
//! - [`smallfan`]: exact propagation for small fan-in layers by direct
//!   tensor contraction (shortcuts, depthwise kernels, nonlinearities).
//! - [`fftsum`]: medium fan-in summation of integer-valued PMFs via FFT,
//!   plus max/probabilistic/average pooling.
//! - [`clt`]: large fan-in linear layers via the Lyapunov CLT with exact
//!   mean/variance propagation and sign activations.
//! - [`heads`]: analytic softmax classification bound and Gaussian
//!   regression head, with gradients and prediction.
//! - [`network`], [`trainer`]: sequential graphs and the lambda-weighted
//!   objective with ADAM ascent.
//! - [`eval`]: analytic / Monte-Carlo / MAP evaluation modes and metrics.

pub mod categorical;
pub mod clt;
pub mod error;
pub mod eval;
pub mod fftsum;
pub mod grid;
pub mod heads;
pub mod moments;
pub mod network;
pub mod smallfan;
pub mod trainer;

pub use categorical::CategoricalVector;
pub use error::{BqnError, Result};
pub use grid::QuantizationGrid;
pub use moments::MomentSummary;
