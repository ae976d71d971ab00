//! Adversarial training with hard-training-sample purification.
//!
//! Samples that a held-out (offline, k-fold) or current (online) model finds
//! hard are scored with the correct-class softmax probability or the absolute
//! relative Mahalanobis distance of their pre-logit features, the lowest `R`
//! are dropped (or trained clean), and the rest are adversarially trained with
//! ℓ∞ PGD.

pub mod attack;
pub mod dataio;
pub mod error;
pub mod harness;
pub mod model;
pub mod purification;
pub mod rng;
pub mod scoring;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
