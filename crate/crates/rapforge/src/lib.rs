//! Training and evaluation of universal adversarial perturbation generators.
//!
//! An image-to-image generator is trained against a frozen convolutional
//! classifier so that its projected outputs flip the classifier's
//! predictions. The objective can be plain cross-entropy on the perturbed
//! logits, a relativistic cross-entropy on the logit *difference* between
//! perturbed and clean images, or a targeted variant. Perturbations are kept
//! inside an l-infinity budget by an exact projection step, optionally after
//! Gaussian smoothing of the raw generator output.
//!
//! The crate is organized around:
//! - [`diffcore`]: a small f64 tensor library with taped reverse-mode
//!   autodiff (the substrate for everything else),
//! - [`nets`]: the toy classifier/generator registry plus weight-file I/O,
//! - [`losses`]: the three attack objectives and their analytic gradients,
//! - [`perturb`]: projection, Gaussian smoothing, and the noise baseline,
//! - [`train`]: Adam and the generator/classifier training loops,
//! - [`data`]: IDX ingestion and deterministic synthetic domains,
//! - [`eval`]: fooling-rate/accuracy metrics and transfer matrices,
//! - [`cli`]: the `rapforge` command implementations.

pub mod cli;
pub mod data;
pub mod diffcore;
mod error;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod perturb;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
