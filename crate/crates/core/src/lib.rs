//! Imputation of large irregular missing regions in gridded urban event
//! histograms.
//!
//! The pipeline: rasterize point events into hourly 2D histograms, stack them
//! into 3D blocks (time x height x width), generate hole masks (random-walk or
//! biased toward dense regions), train a 3D partial-convolution U-Net to
//! reconstruct the holes, and compare against classical interpolation
//! baselines with hole-restricted metrics.

pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod masking;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
