//! Cascaded plane-sweep multi-view stereo with a learned per-pixel depth
//! range estimator.

pub mod cost_volume;
pub mod error;
pub mod eval;
pub mod features;
pub mod fusion;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod loss;
pub mod nn;
pub mod pipeline;
pub mod rem;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::{DepthMap, Grid, Mask};
