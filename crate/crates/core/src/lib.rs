//! Simulated reference images for reference-based defect detection.
//!
//! A generative model trained on clean images produces a defect-free
//! "simulated reference" for any candidate image. The same reference can
//! then replace a physically acquired one in three detectors: a classic
//! difference-image detector, a supervised segmentation network over the
//! (candidate, reference) pair, and a patch-feature memory bank scored by
//! nearest-neighbor distance.
//!
//! Modules, bottom-up:
//! - [`imagecore`]: images, PNG I/O, registration, post-processing, synthetic defects
//! - [`nncore`]: reverse-mode autodiff, layers, losses, Adam, checkpoints
//! - [`generative`]: inpainting and VAE reference simulators
//! - [`segmenter`]: the supervised pair segmenter
//! - [`membank`]: feature grids, memory banks, coresets, k-NN scoring
//! - [`eval`]: datasets, metrics, and end-to-end experiments

pub mod error;
pub mod eval;
pub mod generative;
pub mod imagecore;
pub mod membank;
pub mod nncore;
pub mod segmenter;
pub mod util;

pub use error::{Error, Result};
