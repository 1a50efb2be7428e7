//! Time-varying (evolutionary) spectrum estimation by adaptive kernel smoothing.
//!
//! Windowed transforms on an overlapping time-frequency lattice give log
//! point estimates; crossproduct kernels with locally chosen halfwidths
//! smooth them. Halfwidths come from plug-in estimates of the expected loss.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix it to `f64`.

pub mod analytic;
pub mod coherence;
pub mod config;
pub mod error;
pub mod io;
pub mod kernel;
pub mod lattice;
pub mod loss;
pub mod pipeline;
pub mod render;
pub mod scalar;
pub mod signal;
pub mod smooth;
pub mod stats;
pub mod sweep;
pub mod taper;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Series = signal::TimeSeries<f64>;
pub type Window = taper::Taper<f64>;
pub type Lattice = lattice::TFLattice<f64>;
pub type Field = lattice::LogSpectralField<f64>;
pub type Covariance = lattice::CovarianceModel<f64>;
pub type Kernel = kernel::Kernel1D<f64>;
pub type Smoother = smooth::SmootherSpec<f64>;
