//! Dimension-free self-normalised Bernstein and Hoeffding confidence
//! machinery, kernel logistic regression with anytime confidence bands, a
//! logistic UCB bandit, and a Monte Carlo harness that checks the coverage
//! guarantees in explicit finite dimensions.
//!
//! Modules:
//!
//! | module | contents |
//! |--------|----------|
//! | [`kernel`] | kernels, Gram matrices, information gain, `ρ*` |
//! | [`bounds`] | Bernstein/Hoeffding radii, stitching, logistic width, regret curve |
//! | [`logistic`] | dual Newton solver, predictive variance, primal oracle |
//! | [`bandit`] | logistic UCB over a finite arm set |
//! | [`validation`] | martingale simulation, coverage and construction checks |
//! | [`cli`] | JSON configs, CSV output, subcommand drivers |

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bandit;
pub mod bounds;
pub mod cli;
pub mod error;
pub mod kernel;
pub mod logistic;
pub mod rng;
pub mod validation;

pub use error::{Error, Result};
