//! Deployment-aware adversarial evaluation of synthetic-image detectors.
//!
//! Band-constrained perturbations are optimized with projected gradient
//! descent through randomized, differentiable platform transforms (resize,
//! JPEG, screenshot), in per-image and universal regimes, and the detector is
//! then scored with AUC, fake→real rate, calibration error and bootstrap
//! confidence intervals.

pub mod attack;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod image;
pub mod json;
pub mod metrics;
pub mod perturb;
pub mod timestamp;
pub mod transforms;

pub use error::{Error, Result};
pub use image::ImageArray;
