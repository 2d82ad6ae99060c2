//! Likelihood-informed subspace (LIS) construction and dimension-reduced
//! posterior sampling for Bayesian inverse problems with Gaussian priors.
//!
//! The posterior of a nonlinear inverse problem often differs from the prior
//! only on a low-dimensional subspace of the parameter space. This crate
//! locates that subspace from the spectrum of prior-preconditioned
//! Gauss-Newton Hessians of the data misfit, factorizes the posterior into a
//! low-dimensional part that must be sampled and a Gaussian complement that is
//! handled in closed form, and provides Rao-Blackwellized estimators that
//! recombine the two.
//!
//! The crate is organized bottom-up:
//!
//! - [`linalg`]: Cholesky factorization with diagnostics, dense and
//!   matrix-free truncated eigensolvers, subspace angles.
//! - [`prior`]: Gaussian process priors on structured grids, whitening,
//!   and the prior factorization induced by a subspace.
//! - [`model`]: the forward-model abstraction, misfits, gradients, and
//!   Gauss-Newton Hessian actions; exact posteriors for linear models.
//! - [`lis`]: local and global subspace construction, projectors, and the
//!   adaptive algorithm that interleaves subspace sampling with updates.
//! - [`mcmc`]: MAP optimization, adaptive MALA, and chain diagnostics.
//! - [`estimators`]: Rao-Blackwellized means, covariances, and expectations
//!   of decomposable functions.
//! - [`models`]: benchmark problems (a linear test model, an elliptic PDE
//!   with distributed log-permeability, and a limb-sounding transmission
//!   model) plus synthetic data generation.
//! - [`cli`]: configuration schema and the subcommands behind the `lisinfer`
//!   binary.
//!
//! ```
//! use lisinfer::models::linear::LinearProblem;
//! use lisinfer::lis::{adapt_lis, AdaptConfig};
//!
//! // A small linear-Gaussian problem: the subspace converges in two sweeps
//! // and spans the dominant generalized eigenvectors exactly.
//! let problem = LinearProblem::seeded(12, 4, 7).into_problem();
//! let mut config = AdaptConfig::default();
//! config.tau_local = 1e-6;
//! config.tau_global = 1e-6;
//! config.subchain_len = 20;
//! config.max_iters = 10;
//! config.dist_tol = 1e-8;
//! let adapted = adapt_lis(&problem, &config, 99).unwrap();
//! assert!(adapted.lis.dim() <= 4);
//! ```

pub mod cli;
pub mod estimators;
pub mod io;
pub mod linalg;
pub mod lis;
pub mod mcmc;
pub mod model;
pub mod models;
pub mod prior;
