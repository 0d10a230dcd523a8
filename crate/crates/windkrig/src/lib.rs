//! Wind-informed spatial interpolation with Bayesian Gaussian processes.
//!
//! The crate fits five correlation families to point-referenced data and
//! krigs them onto new sites: isotropic and geometrically anisotropic
//! Matern fields, two families whose local structure follows an observed
//! wind field (closed-form kernels and a projection convolution), and one
//! whose kernels are themselves latent Gaussian processes. Fitting is
//! adaptive random-walk Metropolis within Gibbs; fitted models are scored
//! by deviance information, posterior predictive loss, and held-out
//! predictive density.
//!
//! Start from the runnable examples (`cargo run --release --example
//! simulate_and_fit`) or the `cli` module, which exposes the same pipeline
//! as `fit` / `predict` / `compare` / `simulate` / `wind-interp`
//! subcommands over CSV and TOML files.

pub mod bessel;
pub mod cli;
pub mod covariance;
pub mod error;
pub mod geo;
pub mod inference;
pub mod io;
mod linalg;
pub mod model;
pub mod predict;
pub mod selection;
pub mod sim;
