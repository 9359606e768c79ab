//! Bayesian model-based clustering of bivariate time series at chosen
//! quantile levels.
//!
//! Each cluster is a bivariate quantile regression whose errors follow
//! asymmetric Laplace marginals, written as a Gaussian location-scale
//! mixture over latent exponential weights. The two latent weights of a
//! time point are coupled through a Downton bivariate exponential and the
//! Gaussian layer carries a per-cluster correlation. Posterior inference is
//! a Metropolis-within-Gibbs sampler; the number of spline basis functions is
//! chosen by an AIC-like check-loss criterion and the number of clusters by a
//! composite DIC.
//!
//! Module map:
//! - [`distributions`]: densities, check loss and random variate generators.
//! - [`basis`]: clamped B-spline bases and per-time design matrices.
//! - [`qreg`]: check-loss quantile regression and basis-size selection.
//! - [`model`]: panel container, likelihoods and forward simulation.
//! - [`sampler`]: the MCMC updates, chain driver and posterior summaries.
//! - [`selection`]: composite DIC and selection of the number of clusters.
//! - [`simbench`]: simulation scenarios, Adjusted Rand Index and benchmark.
//! - [`pipeline`]: CSV ingestion, run configuration and the `fit` workflow.

// Parameter checks are written as `!(x > 0.0)` so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod distributions;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod qreg;
pub mod sampler;
pub mod seed;
pub mod selection;
pub mod simbench;

pub use error::{Error, Result};
