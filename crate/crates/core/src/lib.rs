//! Sparse-view dynamic photoacoustic tomography.
//!
//! Ring-array acquisition is simulated with a discrete circular-integral
//! forward model. Reconstructions come from frame-by-frame DAS/UBP baselines
//! or from a Fourier-feature MLP fitted to the measurements under data
//! consistency, temporal total variation and nuclear-norm penalties. The
//! fitted network can be queried at denser time coordinates for temporal
//! super-resolution.

pub mod baselines;
pub mod cli;
pub mod error;
pub mod forward;
pub mod geometry;
pub mod inr;
pub mod io;
pub mod metrics;
pub mod regularizers;
pub mod trainer;

pub use error::{Error, Result};
