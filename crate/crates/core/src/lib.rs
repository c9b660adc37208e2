//! Input-conditioned neural KKL observers.
//!
//! The crate is organised bottom-up:
//!
//! * [`diffcore`] — tensors, recorded graphs with reverse mode and
//!   forward-mode JVPs, Adam and learning-rate schedules;
//! * [`dynamics`] — benchmark systems, input signals, integrators and noise;
//! * [`networks`] — MLPs, a bias-free GRU, the injection network and the
//!   low-rank hypernetwork;
//! * [`observer`] — observer matrices, model bundles, latent simulation,
//!   decoding and PDE residuals;
//! * [`training`] — datasets and the four training procedures;
//! * [`analysis`] — SMAPE, error-bound certificates and the benchmark
//!   harness.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`). The aliases
//! below fix the scalar to `f64`, which is what training and the pipeline
//! use.

pub mod analysis;
pub mod diffcore;
pub mod dynamics;
pub mod error;
pub mod networks;
pub mod observer;
pub mod rng;
pub mod scalar;
pub mod training;

pub use error::{KklError, Result};
pub use scalar::Scalar;

pub type Tensor = diffcore::Tensor<f64>;
pub type Tensor32 = diffcore::Tensor<f32>;
pub type Graph = diffcore::Graph<f64>;
pub type Bindings = diffcore::Bindings<f64>;
pub type ParamSet = diffcore::ParamSet<f64>;
