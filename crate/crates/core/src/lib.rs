//! Near-field holographic MIMO channel simulation and estimation.
//!
//! The crate synthesises spherical-wavefront UPA channels, decomposes the
//! coupled azimuth/elevation/distance parameters through constructed
//! covariance matrices, reconstructs each parameter with off-grid
//! compressive sensing solved by variational Bayes plus forward-backward
//! message passing, corrects angular index assignment across dimensions and
//! rebuilds the channel auto-correlation matrix.

pub mod channel;
pub mod covariance;
pub mod error;
pub mod estimator;
pub mod grids;
pub mod recovery;
pub mod rng;
pub mod upa;
pub mod vbi;

pub use error::{Error, Result};
pub use upa::{UpaConfig, WavefrontMode};
