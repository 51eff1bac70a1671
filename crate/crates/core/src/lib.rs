//! Adversarially robust infrared/visible image fusion.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors, a reverse-mode autodiff tape and a
//!   finite-difference gradient checker.
//! - [`image_io`]: binary PGM/PPM, BT.601 colour handling, dataset manifests.
//! - [`network`]: the U-Net fusion network with defensive refinement modules
//!   built from kernel-attention blocks, and its checkpoint format.
//! - [`losses`]: MSE, SSIM, the base fusion loss and the anti-attack loss.
//! - [`adversary`]: FGSM and dual-input PGD under an ℓ∞ budget.
//! - [`labels`]: pseudo-label recipes and their on-disk cache.
//! - [`training`]: Adam and the adversarial training loop.
//! - [`metrics`]: EN, SD, PSNR, CC, SCD, signal maps and robustness reports.
//! - [`config`]: the sectioned `key = value` run configuration.

pub mod adversary;
pub mod config;
pub mod error;
pub mod image_io;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
