//! Bayesian multiresolution estimation of annual small-area functions.
//!
//! Statistical agencies often publish only aggregate statistics: sums over
//! groups of areas ("blocks") and over multi-year periods, each with a known
//! sampling variance.  This crate recovers the latent annual, single-area
//! functions that generated those aggregates.  The model places a matrix
//! Gaussian process prior on per-area regression coefficients and clusters
//! the per-area covariance parameters with a Dirichlet process so that areas
//! with similar smoothness share strength:
//!
//! ```text
//! y_bq ~ N( sum_{l in b} sum_{j in q} x_lj' B_l[, j] , sigma2_bq )
//! B_l  ~ MatrixNormal( 0 ; Lambda_y^-1 row covariance, C(kappa) column covariance )
//! (Lambda_y, kappa)_l ~ DP(alpha, G0)
//! ```
//!
//! Modules follow the pipeline: [`linkage`] loads and validates the
//! block/county/period bookkeeping, [`kernels`] provides the covariance
//! building blocks, [`mixture`] the Dirichlet-process machinery, [`samplers`]
//! the MCMC updates, [`estimands`] posterior summaries and fit statistics,
//! and [`synth`] generators for benchmark data.  The `multires` binary wires
//! these together behind `simulate`, `fit`, `summarize`, and `holdout`
//! subcommands (see [`cli`]).

pub mod chain;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod estimands;
pub mod kernels;
pub mod linkage;
pub mod mixture;
pub mod numeric;
pub mod samplers;
pub mod slice;
pub mod synth;

pub use error::{Error, Result};
