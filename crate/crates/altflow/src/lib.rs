//! Anomaly detection with normalizing flows and an alternately trained
//! learnable base distribution.
//!
//! A stack of affine coupling layers maps feature tensors to a latent space
//! where log-likelihood is tractable. The base distribution over that latent
//! space is either frozen standard normal or a learnable diagonal Gaussian
//! that is refreshed on dedicated epochs with its own step size. Scoring,
//! distribution-fit diagnostics, and localization metrics sit on top.

pub mod base;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod flow;
pub mod numerics;
pub mod scoring;
pub mod trainer;

pub use error::{Error, Result};
