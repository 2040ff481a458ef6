//! Patch-transformer prototype classifier: feature channels act as prototypes,
//! a sparse non-negative layer turns their presence into class scores, and
//! activation maps are evaluated as lesion detectors.

pub mod classifier;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod explain;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod par;
pub mod prototype_head;
pub mod raster;
pub mod training;

pub use error::{Error, Result};
