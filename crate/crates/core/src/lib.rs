//! Thermal diffusivity estimation from noisy temperature-field sequences.
//!
//! Given thermographic frames of a diffusion process, the estimator balances
//! the governing equation directly: it computes noise-robust temporal and
//! spatial derivatives, forms the per-pixel ratio of the temperature rate of
//! change to its Laplacian, and averages that ratio under an attention field
//! that concentrates on regions of high thermal activity. No PDE solve is
//! involved in estimation; the forward solver exists to generate synthetic
//! data and to validate estimates by prediction.
//!
//! Modules:
//! - [`field`]: masked rasters and frame stacks
//! - [`filters`]: noise-robust differentiator kernels and convolution
//! - [`attention`]: activity weighting and confidence thresholding
//! - [`estimator`]: global, windowed and baseline estimators
//! - [`simulator`]: explicit diffusion solver and scenario configuration
//! - [`analysis`]: prediction error and density estimates
//! - [`io`]: stack file format and CSV ingestion
//! - [`export`]: PGM/CSV emitters
//! - [`cli`]: batch command-line entry points

pub mod analysis;
pub mod attention;
pub mod cli;
pub mod error;
pub mod estimator;
pub mod export;
pub mod field;
pub mod filters;
pub mod io;
pub mod simulator;

pub use error::{Error, Result};
pub use estimator::{EstimateReport, EstimatorConfig, WindowSpec};
pub use field::{FrameStack, GridSpec, ScalarField};
