//! Fundus image analysis: localization, segmentation and rule-based
//! classification of the optic disc, macula and vessels, with report
//! synthesis and a synthetic ground-truth generator.

pub mod classifier;
pub mod codec;
pub mod config;
pub mod error;
pub mod localizer;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod raster;
pub mod reporter;
pub mod segmenter;
pub mod synthgen;

pub use error::{Error, Result};
