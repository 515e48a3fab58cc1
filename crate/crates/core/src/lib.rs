//! Personalized representations: adapt a frozen vision encoder to one object
//! instance from three real photos plus a synthetic pool, then measure the
//! gain on classification, retrieval, detection and segmentation.

pub mod analysis;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod perceptual;
pub mod pipeline;
pub mod raster;
pub mod seed;
pub mod toy;
pub mod training;

pub use error::{Error, Result};
