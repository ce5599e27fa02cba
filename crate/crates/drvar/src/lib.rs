//! Doubly robust estimation of the average causal effect with variance
//! estimators that stay valid under nuisance-model misspecification.
//!
//! The point estimator combines inverse-probability weighting by a logistic
//! propensity model with a linear outcome-regression augmentation. Five
//! inference strategies are provided:
//!
//! - influence-function plug-in variance ([`aipw`]),
//! - joint sandwich over the stacked estimating equations ([`variance`]),
//! - efficient-score projection ([`variance`]),
//! - bootstrap joint inference ([`variance`]),
//! - sample-splitting and cross-fitting ([`sscf`]).
//!
//! [`simlab`] hosts the synthetic data-generating process, the truth oracle,
//! and the Monte Carlo harness that produces SER, coverage, and correlation
//! diagnostics. The `drvar` binary exposes everything as batch subcommands.

pub mod aipw;
pub mod data;
pub mod error;
pub mod linalg;
pub mod nuisance;
pub mod report;
pub mod simlab;
pub mod sscf;
pub mod stream;
pub mod variance;

pub use error::{Error, Result};
