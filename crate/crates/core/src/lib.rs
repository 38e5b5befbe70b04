//! Video segmentation feature enhancement: spatial-temporal fusion with
//! interlaced cross-self attention, and memory-augmented refinement against
//! a key-value bank of hard features and class prototypes.

pub mod attention;
mod error;
pub mod format;
pub mod layers;
pub mod mar;
pub mod numerics;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod selftest;
pub mod stf;

pub use error::{Error, Result};
