//! Reliability-based design optimization with a derivative-free trust-region
//! method.
//!
//! The failure-probability constraint c(x) = ln P(x) − ln θ ≤ 0 is estimated by
//! Monte Carlo simulation. Inside each trust region a quadratic surrogate of c
//! is fitted from a single full reliability evaluation at the centre: the
//! samples drawn there are reweighted by likelihood ratios to obtain the
//! constraint at every regression point. The surrogate is certified by
//! leave-one-out cross-validation and used to solve the trust-region
//! subproblem with SQP.
//!
//! A score-function gradient baseline and the cantilever-beam benchmark are
//! included for comparison.

pub mod benchmark;
pub mod driver;
pub mod error;
pub mod model;
pub mod qp;
pub mod reliability;
pub mod sf;
pub mod sqp;
pub mod streams;
pub mod subproblem;
pub mod surrogate;

pub use error::{RboError, Result};
