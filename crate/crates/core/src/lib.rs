//! Stochastic asymptotical regularization for linear ill-posed problems.
//!
//! The flow `dx = A*(y^δ - A x) dt + f(t) dB_t` is integrated in the singular
//! basis of a discretized compact operator. Ensembles of paths give
//! regularized solutions together with pointwise uncertainty bands.

// `!(x > 0.0)` also rejects NaN, which is the intent in input validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod ensemble;
pub mod experiments;
pub mod error;
pub mod integrators;
pub mod io;
pub mod noise;
pub mod problems;
mod quadrature;
pub mod spectral;
pub mod stopping;

pub use error::{Result, SarError};
