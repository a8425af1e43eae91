//! Core of the OASIC pipeline: occlusion segmentation by patch-feature
//! anomaly scoring, gray masking, severity estimation and severity-informed
//! selection from a pool of occlusion-specialised classifiers.
//!
//! The crate is `no_std` + `alloc`. File formats, the CLI and the experiment
//! runner live in the `oasic` companion crate.
//!
//! A typical prediction runs
//!
//! 1. [`bank::MemoryBank::score_image`] to get an [`AnomalyMap`],
//! 2. [`threshold::otsu_threshold`] and [`threshold::threshold_fixed`] to
//!    binarise it into an [`OcclusionMask`],
//! 3. [`severity::gray_mask`] and [`severity::estimate_severity`],
//! 4. [`classifier::ModelPool::select`] followed by classification of the
//!    masked image.
//!
//! [`predict::oasic_predict`] chains all of these.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod bank;
pub mod classifier;
pub mod error;
pub mod features;
pub mod image;
pub mod metrics;
pub mod predict;
pub mod seed;
pub mod severity;
pub mod stats;
pub mod synth;
pub mod threshold;
pub mod toy;

pub use crate::error::{Error, Result};
pub use crate::image::{AnomalyMap, Image, LabeledImage, OcclusionMask, Rgb};
