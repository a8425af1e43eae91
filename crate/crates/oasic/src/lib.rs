//! File formats, feature sources, the experiment runner and the command line
//! front end for the occlusion-aware classification pipeline.

pub mod cli;
pub mod error;
pub mod experiment;
pub mod features;
pub mod formats;

pub use error::{Error, Result};
