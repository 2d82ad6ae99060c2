//! Doctest harness for the guide in `book/`.
//!
//! Each module includes one chapter as its documentation, so every fenced
//! Rust snippet in the book compiles and runs under `cargo test --doc`.
//! If a chapter drifts out of sync with the library, the build breaks here
//! rather than in a reader's terminal.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/bayesian-inverse-problems.md")]
pub mod bayesian_inverse_problems {}

#[doc = include_str!("../../../book/src/whitening-and-priors.md")]
pub mod whitening_and_priors {}

#[doc = include_str!("../../../book/src/likelihood-informed-subspace.md")]
pub mod likelihood_informed_subspace {}

#[doc = include_str!("../../../book/src/adaptive-construction.md")]
pub mod adaptive_construction {}

#[doc = include_str!("../../../book/src/sampling.md")]
pub mod sampling {}

#[doc = include_str!("../../../book/src/rao-blackwellization.md")]
pub mod rao_blackwellization {}

#[doc = include_str!("../../../book/src/benchmark-models.md")]
pub mod benchmark_models {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
