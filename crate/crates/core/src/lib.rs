//! Single-source domain-generalized object detection toolkit.
//!
//! The source domain is diversified with a catalog of visual corruptions
//! ([`corruptions`]); a detector ([`detector`]) is trained on clean and
//! corrupted views of each image while its class distributions (KL) and
//! decoded boxes (squared L2) are aligned over shared proposals
//! ([`align_losses`], [`trainer`]). [`eval_calib`] scores the result with
//! mAP@0.5 and detection expected calibration error.

pub mod align_losses;
pub mod bbox;
pub mod corruptions;
pub mod datasets;
pub mod detector;
pub mod error;
pub mod eval_calib;
pub mod experiment;
pub mod fixtures;
pub mod image;
pub mod par;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use image::ImageTensor;
