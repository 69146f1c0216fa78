//! Multi-group covariance estimation on a shared low-dimensional subspace.
//!
//! Each group's covariance is modeled as a spiked matrix whose anisotropic
//! part lives on a subspace common to all groups:
//! `Sigma_k = V Psi_k V' + sigma2_k I`. The crate provides
//!
//! - [`model`]: domain types and exact likelihood identities,
//! - [`stiefel`]: Cayley-transform trace maximization on the Stiefel manifold,
//! - [`em`]: empirical-Bayes EM for the shared subspace and goodness of fit,
//! - [`gibbs`]: posterior sampling of the projected covariances, posterior
//!   regions, and the Stein-loss Bayes estimator,
//! - [`rank`]: singular-value-threshold rank selection,
//! - [`sim`]: synthetic data generation, losses, asymptotic benchmarks, and
//!   the simulation experiments.

pub mod em;
pub mod error;
pub mod gibbs;
pub mod model;
pub mod rank;
pub mod sim;
pub mod stiefel;

pub use error::{Error, Result};
