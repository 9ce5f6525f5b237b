//! Band-energy analysis, constrained noise-residual filters and a dual-path
//! attention detector for synthetic speech.

pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod signal;
pub mod srm;
pub mod synth;
pub mod train;
pub mod wav;

pub use error::{Result, SonarError};
